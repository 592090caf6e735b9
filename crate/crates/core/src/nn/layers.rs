//! Parameterized building blocks recorded onto a [`Tape`].

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Init, NnError, NodeId, ParamId, ParamStore, Real, Segments, Tape};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Real>(ps: &mut ParamStore<R>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: ps.add(&format!("{name}.w"), d_in, d_out, Init::Xavier, rng),
            b: ps.add(&format!("{name}.b"), 1, d_out, Init::Zeros, rng),
        }
    }

    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, x: NodeId) -> Result<NodeId, NnError> {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w)?;
        t.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(ps: &mut ParamStore<R>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), 1, d, Init::Ones, rng),
            beta: ps.add(&format!("{name}.beta"), 1, d, Init::Zeros, rng),
        }
    }

    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, x: NodeId) -> Result<NodeId, NnError> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layernorm(x, g, b)
    }
}

/// Two-layer ReLU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(ps, &format!("{name}.0"), d_in, d_hidden, rng),
            out: Linear::new(ps, &format!("{name}.1"), d_hidden, d_out, rng),
        }
    }

    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, x: NodeId) -> Result<NodeId, NnError> {
        let h = self.hidden.forward(t, x)?;
        let h = t.relu(h);
        self.out.forward(t, h)
    }
}

/// Post-norm Transformer block: self-attention then feed-forward, each
/// wrapped in a residual connection and layer norm.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d % heads == 0, "{d} does not split into {heads} heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d, rng),
            ff: Mlp::new(ps, &format!("{name}.ff"), d, d_ff, d, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d, rng),
            heads,
        }
    }

    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, x: NodeId, segs: &Arc<Segments>) -> Result<NodeId, NnError> {
        let q = self.q.forward(t, x)?;
        let k = self.k.forward(t, x)?;
        let v = self.v.forward(t, x)?;
        let a = t.self_attention(q, k, v, segs, self.heads)?;
        let a = self.o.forward(t, a)?;
        let h = t.add(x, a)?;
        let h = self.ln1.forward(t, h)?;
        let f = self.ff.forward(t, h)?;
        let h2 = t.add(h, f)?;
        self.ln2.forward(t, h2)
    }
}

/// Input projection followed by a stack of encoder blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d: usize,
        layers: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = Linear::new(ps, &format!("{name}.input"), d_in, d, rng);
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(ps, &format!("{name}.block{i}"), d, heads, d_ff, rng))
            .collect();
        Self { input, blocks }
    }

    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, x: NodeId, segs: &Arc<Segments>) -> Result<NodeId, NnError> {
        let mut h = self.input.forward(t, x)?;
        for b in &self.blocks {
            h = b.forward(t, h, segs)?;
        }
        Ok(h)
    }
}

/// Gated recurrent unit:
/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `ĥ = tanh(xWh + (r⊙h)Uh + bh)`, `h' = (1−z)⊙h + z⊙ĥ`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl GruCell {
    pub fn new<R: Real>(ps: &mut ParamStore<R>, name: &str, d_in: usize, d_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut add = |s: &str, r: usize, c: usize, init: Init| ps.add(&format!("{name}.{s}"), r, c, init, rng);
        Self {
            wz: add("wz", d_in, d_hidden, Init::Xavier),
            uz: add("uz", d_hidden, d_hidden, Init::Xavier),
            bz: add("bz", 1, d_hidden, Init::Zeros),
            wr: add("wr", d_in, d_hidden, Init::Xavier),
            ur: add("ur", d_hidden, d_hidden, Init::Xavier),
            br: add("br", 1, d_hidden, Init::Zeros),
            wh: add("wh", d_in, d_hidden, Init::Xavier),
            uh: add("uh", d_hidden, d_hidden, Init::Xavier),
            bh: add("bh", 1, d_hidden, Init::Zeros),
            d_in,
            d_hidden,
        }
    }

    fn gate<R: Real>(t: &mut Tape<'_, R>, x: NodeId, h: NodeId, w: ParamId, u: ParamId, b: ParamId) -> Result<NodeId, NnError> {
        let (w, u, b) = (t.param(w), t.param(u), t.param(b));
        let xw = t.matmul(x, w)?;
        let hu = t.matmul(h, u)?;
        let s = t.add(xw, hu)?;
        t.add_bias(s, b)
    }

    /// One step over a batch: `x` is `B×d_in`, `h` is `B×d_hidden`.
    pub fn step<R: Real>(&self, t: &mut Tape<'_, R>, x: NodeId, h: NodeId) -> Result<NodeId, NnError> {
        if t.shape(x).1 != self.d_in || t.shape(h).1 != self.d_hidden || t.shape(x).0 != t.shape(h).0 {
            return Err(NnError::ShapeMismatch(format!(
                "gru step x {:?} h {:?} for {}->{}",
                t.shape(x),
                t.shape(h),
                self.d_in,
                self.d_hidden
            )));
        }
        let z = Self::gate(t, x, h, self.wz, self.uz, self.bz)?;
        let z = t.sigmoid(z);
        let r = Self::gate(t, x, h, self.wr, self.ur, self.br)?;
        let r = t.sigmoid(r);
        let rh = t.mul(r, h)?;
        let cand = Self::gate(t, x, rh, self.wh, self.uh, self.bh)?;
        let cand = t.tanh(cand);
        let keep = t.affine(z, -1.0, 1.0);
        let a = t.mul(keep, h)?;
        let b = t.mul(z, cand)?;
        t.add(a, b)
    }
}
