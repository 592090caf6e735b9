//! Reverse-mode differentiation over a recorded tape.
//!
//! Every op works on whole batches: rows of several samples are stacked and
//! per-sample structure is carried by [`Segments`].

use std::sync::Arc;

use super::tensor::{gemm, Real, Tensor};
use super::{attention, NnError, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Contiguous row ranges, one per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<(usize, usize)>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut bounds = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &n in lengths {
            bounds.push((at, at + n));
            at += n;
        }
        Self { bounds }
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn total(&self) -> usize {
        self.bounds.last().map_or(0, |b| b.1)
    }

    pub fn get(&self, i: usize) -> (usize, usize) {
        self.bounds[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bounds.iter().copied()
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<R> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, R),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    SelfAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segs: Arc<Segments>,
        heads: usize,
        probs: Vec<Tensor<R>>,
    },
    SegScores {
        q: NodeId,
        k: NodeId,
        segs: Arc<Segments>,
        scale: R,
    },
    SegSoftmax(NodeId, Arc<Segments>),
    SegWeightedSum {
        w: NodeId,
        v: NodeId,
        segs: Arc<Segments>,
    },
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ScatterRows(NodeId, Vec<usize>),
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<R>,
        probs: Tensor<R>,
    },
    SegSoftmaxCe {
        scores: NodeId,
        segs: Arc<Segments>,
        targets: Vec<usize>,
        weights: Vec<R>,
        probs: Vec<R>,
    },
    Sum(Vec<NodeId>),
    SumAll(NodeId),
}

struct Node<R> {
    op: Op<R>,
    value: Option<Tensor<R>>,
}

/// A forward computation recorded for differentiation. Parameters are
/// borrowed from the store rather than copied.
pub struct Tape<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

fn softmax_in_place<R: Real>(xs: &mut [R]) {
    let m = xs.iter().copied().fold(xs[0], R::max);
    let mut z = R::ZERO;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x = *x / z;
    }
}

fn map<R: Real>(t: &Tensor<R>, f: impl Fn(R) -> R) -> Tensor<R> {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    // Split by sign keeps exp from overflowing.
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, op: Op<R>, value: Option<Tensor<R>>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Tensor<R> {
        match &self.nodes[n.0] {
            Node { op: Op::Param(p), .. } => self.params.get(*p),
            Node { value: Some(v), .. } => v,
            Node { value: None, .. } => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn shape(&self, n: NodeId) -> (usize, usize) {
        self.value(n).shape()
    }

    pub fn input(&mut self, t: Tensor<R>) -> NodeId {
        self.push(Op::Input, Some(t))
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[p.0] {
            return n;
        }
        let n = self.push(Op::Param(p), None);
        self.param_nodes[p.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return Err(shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(R::ONE, av, false, bv, false, R::ZERO, &mut out);
        Ok(self.push(Op::MatMul(a, b), Some(out)))
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(shape_err(format!("add_bias {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += x;
            }
        }
        Ok(self.push(Op::AddBias(a, b), Some(out)))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what} {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), Some(out)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(Op::Mul(a, b), Some(out)))
    }

    /// `alpha * a + beta`.
    pub fn affine(&mut self, a: NodeId, alpha: f64, beta: f64) -> NodeId {
        let (al, be) = (R::from_f64(alpha), R::from_f64(beta));
        let out = map(self.value(a), |x| al * x + be);
        self.push(Op::Affine(a, al), Some(out))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), |x| if x > R::ZERO { x } else { R::ZERO });
        self.push(Op::Relu(a), Some(out))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), R::tanh);
        self.push(Op::Tanh(a), Some(out))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid(a), Some(out))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, NnError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols;
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(shape_err(format!("layernorm gain/shift must be 1x{d}")));
        }
        let mut out = Tensor::zeros(xv.rows, d);
        let mut xhat = vec![R::ZERO; xv.rows * d];
        let mut rstd = vec![R::ZERO; xv.rows];
        let inv_d = R::from_f64(1.0 / d as f64);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rs = R::ONE / (var + R::from_f64(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Some(out),
        ))
    }

    /// Multi-head scaled dot-product attention within each segment. `q`, `k`,
    /// `v` are `N×d` with heads occupying consecutive column blocks.
    pub fn self_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segs: &Arc<Segments>,
        heads: usize,
    ) -> Result<NodeId, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || segs.total() != qv.rows {
            return Err(shape_err("self_attention inputs disagree".into()));
        }
        let d = qv.cols;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("{d} columns do not split into {heads} heads")));
        }
        let dh = d / heads;
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for (s0, s1) in segs.iter() {
            for h in 0..heads {
                let qh = block(qv, s0, s1, h * dh, dh);
                let kh = block(kv, s0, s1, h * dh, dh);
                let vh = block(vv, s0, s1, h * dh, dh);
                let (o, p) = attention(&qh, &kh, &vh, None)?;
                put_block(&mut out, &o, s0, h * dh);
                probs.push(p);
            }
        }
        Ok(self.push(
            Op::SelfAttention {
                q,
                k,
                v,
                segs: segs.clone(),
                heads,
                probs,
            },
            Some(out),
        ))
    }

    /// Per-row score `scale · q[segment] · k[row]`; output is `N×1`.
    pub fn seg_scores(&mut self, q: NodeId, k: NodeId, segs: &Arc<Segments>, scale: f64) -> Result<NodeId, NnError> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.rows != segs.len() || kv.rows != segs.total() || qv.cols != kv.cols {
            return Err(shape_err("seg_scores inputs disagree".into()));
        }
        let sc = R::from_f64(scale);
        let mut out = Tensor::zeros(kv.rows, 1);
        for (b, (s0, s1)) in segs.iter().enumerate() {
            let qr = qv.row(b);
            for i in s0..s1 {
                out.data[i] = sc * dot(qr, kv.row(i));
            }
        }
        Ok(self.push(
            Op::SegScores {
                q,
                k,
                segs: segs.clone(),
                scale: sc,
            },
            Some(out),
        ))
    }

    /// Softmax of an `N×1` column within each segment.
    pub fn seg_softmax(&mut self, s: NodeId, segs: &Arc<Segments>) -> Result<NodeId, NnError> {
        let sv = self.value(s);
        if sv.cols != 1 || sv.rows != segs.total() {
            return Err(shape_err("seg_softmax expects an Nx1 column".into()));
        }
        let mut out = sv.clone();
        for (s0, s1) in segs.iter() {
            if s1 > s0 {
                softmax_in_place(&mut out.data[s0..s1]);
            }
        }
        Ok(self.push(Op::SegSoftmax(s, segs.clone()), Some(out)))
    }

    /// `out[b] = Σ_{i∈b} w[i] v[i]`.
    pub fn seg_weighted_sum(&mut self, w: NodeId, v: NodeId, segs: &Arc<Segments>) -> Result<NodeId, NnError> {
        let (wv, vv) = (self.value(w), self.value(v));
        if wv.cols != 1 || wv.rows != vv.rows || vv.rows != segs.total() {
            return Err(shape_err("seg_weighted_sum inputs disagree".into()));
        }
        let mut out = Tensor::zeros(segs.len(), vv.cols);
        for (b, (s0, s1)) in segs.iter().enumerate() {
            let o = out.row_mut(b);
            for i in s0..s1 {
                let wi = wv.data[i];
                for (oc, &x) in o.iter_mut().zip(vv.row(i)) {
                    *oc += wi * x;
                }
            }
        }
        Ok(self.push(
            Op::SegWeightedSum {
                w,
                v,
                segs: segs.clone(),
            },
            Some(out),
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let av = self.value(a);
        if start + len > av.cols {
            return Err(shape_err(format!("slice {start}+{len} of {} columns", av.cols)));
        }
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(a, start), Some(out)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let av = self.value(a);
        if start + len > av.rows {
            return Err(shape_err(format!("slice {start}+{len} of {} rows", av.rows)));
        }
        let data = av.data[start * av.cols..(start + len) * av.cols].to_vec();
        let out = Tensor {
            rows: len,
            cols: av.cols,
            data,
        };
        Ok(self.push(Op::SliceRows(a, start), Some(out)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Some(out)))
    }

    /// Places row `i` of `a` at row `idx[i]` of an `n_out`-row zero matrix.
    pub fn scatter_rows(&mut self, a: NodeId, idx: &[usize], n_out: usize) -> Result<NodeId, NnError> {
        let av = self.value(a);
        if idx.len() != av.rows || idx.iter().any(|&i| i >= n_out) {
            return Err(shape_err("scatter_rows index out of range".into()));
        }
        let mut out = Tensor::zeros(n_out, av.cols);
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(j).copy_from_slice(av.row(i));
        }
        Ok(self.push(Op::ScatterRows(a, idx.to_vec()), Some(out)))
    }

    /// `Σ_b weights[b] · −log softmax(logits[b])[targets[b]]` as a `1×1`.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId, NnError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows || weights.len() != lv.rows || targets.iter().any(|&t| t >= lv.cols) {
            return Err(shape_err("softmax_ce targets disagree with logits".into()));
        }
        let mut probs = lv.clone();
        let mut loss = R::ZERO;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            softmax_in_place(probs.row_mut(r));
            if w != 0.0 {
                loss += R::from_f64(w) * -log_prob(lv.row(r), t);
            }
        }
        let weights = weights.iter().map(|&w| R::from_f64(w)).collect();
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            Some(Tensor {
                rows: 1,
                cols: 1,
                data: vec![loss],
            }),
        ))
    }

    /// Segment-wise softmax cross-entropy of an `N×1` score column;
    /// `targets[b]` indexes rows within segment `b`.
    pub fn seg_softmax_ce(
        &mut self,
        scores: NodeId,
        segs: &Arc<Segments>,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId, NnError> {
        let sv = self.value(scores);
        if sv.cols != 1 || sv.rows != segs.total() || targets.len() != segs.len() || weights.len() != segs.len() {
            return Err(shape_err("seg_softmax_ce inputs disagree".into()));
        }
        let mut probs = sv.data.clone();
        let mut loss = R::ZERO;
        for (b, (s0, s1)) in segs.iter().enumerate() {
            if targets[b] >= s1 - s0 {
                return Err(shape_err(format!("target {} outside segment of {}", targets[b], s1 - s0)));
            }
            softmax_in_place(&mut probs[s0..s1]);
            if weights[b] != 0.0 {
                loss += R::from_f64(weights[b]) * -log_prob(&sv.data[s0..s1], targets[b]);
            }
        }
        Ok(self.push(
            Op::SegSoftmaxCe {
                scores,
                segs: segs.clone(),
                targets: targets.to_vec(),
                weights: weights.iter().map(|&w| R::from_f64(w)).collect(),
                probs,
            },
            Some(Tensor {
                rows: 1,
                cols: 1,
                data: vec![loss],
            }),
        ))
    }

    /// Sum of `1×1` nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.iter().any(|&p| self.shape(p) != (1, 1)) {
            return Err(shape_err("sum expects scalars".into()));
        }
        let total = parts.iter().map(|&p| self.value(p).data[0]).sum();
        Ok(self.push(
            Op::Sum(parts.to_vec()),
            Some(Tensor {
                rows: 1,
                cols: 1,
                data: vec![total],
            }),
        ))
    }

    /// Sum of every entry of `a` as a `1×1`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data.iter().copied().sum();
        self.push(
            Op::SumAll(a),
            Some(Tensor {
                rows: 1,
                cols: 1,
                data: vec![total],
            }),
        )
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.value(n).data[0].to_f64()
    }

    /// Gradients of the scalar `loss` for every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor<R>>, NnError> {
        let mut grads = self.params.zeros_like();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients of `loss` into `grads`.
    pub fn backward_into(&self, loss: NodeId, grads: &mut [Tensor<R>]) -> Result<(), NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::GraphNotEvaluated);
        }
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward needs a scalar loss".into()));
        }
        if grads.len() != self.params.len() {
            return Err(shape_err("gradient buffer does not match the parameters".into()));
        }
        let mut g: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor {
            rows: 1,
            cols: 1,
            data: vec![R::ONE],
        });
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.backprop_node(i, &gi, &mut g, grads);
        }
        Ok(())
    }

    fn acc(&self, g: &mut [Option<Tensor<R>>], n: NodeId, delta: Tensor<R>) {
        match &mut g[n.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, g: &mut [Option<Tensor<R>>], n: NodeId, f: impl FnOnce(&mut Tensor<R>)) {
        let slot = &mut g[n.0];
        if slot.is_none() {
            let (r, c) = self.shape(n);
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, gi: &Tensor<R>, g: &mut [Option<Tensor<R>>], grads: &mut [Tensor<R>]) {
        let out = || self.nodes[i].value.as_ref().unwrap();
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(p) => grads[p.0].add_assign(gi),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(g, *a, |ga| gemm(R::ONE, gi, false, bv, true, R::ONE, ga));
                self.acc_with(g, *b, |gb| gemm(R::ONE, av, true, gi, false, R::ONE, gb));
            }
            Op::AddBias(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc_with(g, *b, |gb| {
                    for r in 0..gi.rows {
                        for (o, &x) in gb.data.iter_mut().zip(gi.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor {
                    rows: gi.rows,
                    cols: gi.cols,
                    data: gi.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect(),
                };
                let gb = Tensor {
                    rows: gi.rows,
                    cols: gi.cols,
                    data: gi.data.iter().zip(&av.data).map(|(&x, &y)| x * y).collect(),
                };
                self.acc(g, *a, ga);
                self.acc(g, *b, gb);
            }
            Op::Affine(a, alpha) => {
                let al = *alpha;
                self.acc(g, *a, map(gi, |x| al * x));
            }
            Op::Relu(a) => {
                let y = out();
                let d = Tensor {
                    rows: gi.rows,
                    cols: gi.cols,
                    data: gi
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| if yv > R::ZERO { gv } else { R::ZERO })
                        .collect(),
                };
                self.acc(g, *a, d);
            }
            Op::Tanh(a) => {
                let y = out();
                let d = Tensor {
                    rows: gi.rows,
                    cols: gi.cols,
                    data: gi.data.iter().zip(&y.data).map(|(&gv, &yv)| gv * (R::ONE - yv * yv)).collect(),
                };
                self.acc(g, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = out();
                let d = Tensor {
                    rows: gi.rows,
                    cols: gi.cols,
                    data: gi.data.iter().zip(&y.data).map(|(&gv, &yv)| gv * yv * (R::ONE - yv)).collect(),
                };
                self.acc(g, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let d = gv.cols;
                let mut gx = Tensor::zeros(gi.rows, d);
                let mut ggamma = Tensor::zeros(1, d);
                let mut gbeta = Tensor::zeros(1, d);
                let inv_d = R::from_f64(1.0 / d as f64);
                for r in 0..gi.rows {
                    let gr = gi.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = R::ZERO;
                    let mut sum_gx = R::ZERO;
                    for c in 0..d {
                        ggamma.data[c] += gr[c] * xh[c];
                        gbeta.data[c] += gr[c];
                        let gh = gr[c] * gv.data[c];
                        sum_g += gh;
                        sum_gx += gh * xh[c];
                    }
                    let out_r = gx.row_mut(r);
                    for c in 0..d {
                        let gh = gr[c] * gv.data[c];
                        out_r[c] = rstd[r] * (gh - inv_d * sum_g - xh[c] * inv_d * sum_gx);
                    }
                }
                self.acc(g, *x, gx);
                self.acc(g, *gamma, ggamma);
                self.acc(g, *beta, gbeta);
            }
            Op::SelfAttention {
                q,
                k,
                v,
                segs,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols;
                let dh = d / heads;
                let scale = R::from_f64(1.0 / (dh as f64).sqrt());
                let mut gq = Tensor::zeros(qv.rows, d);
                let mut gk = Tensor::zeros(qv.rows, d);
                let mut gv = Tensor::zeros(qv.rows, d);
                let mut pi = 0;
                for (s0, s1) in segs.iter() {
                    let n = s1 - s0;
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let c0 = h * dh;
                        // gP = gO · Vᵀ ; gV = Pᵀ · gO
                        let mut gp = vec![R::ZERO; n * n];
                        for a in 0..n {
                            let go = &gi.row(s0 + a)[c0..c0 + dh];
                            for b2 in 0..n {
                                gp[a * n + b2] = dot(go, &vv.row(s0 + b2)[c0..c0 + dh]);
                                let pab = p.data[a * n + b2];
                                let gvr = &mut gv.row_mut(s0 + b2)[c0..c0 + dh];
                                for (x, &y) in gvr.iter_mut().zip(go) {
                                    *x += pab * y;
                                }
                            }
                        }
                        // gS = P ⊙ (gP − rowsum(gP ⊙ P)), then the scale
                        for a in 0..n {
                            let row = &mut gp[a * n..(a + 1) * n];
                            let pr = &p.data[a * n..(a + 1) * n];
                            let s: R = row.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                            for (x, &y) in row.iter_mut().zip(pr) {
                                *x = y * (*x - s) * scale;
                            }
                        }
                        for a in 0..n {
                            for b2 in 0..n {
                                let gs = gp[a * n + b2];
                                if gs == R::ZERO {
                                    continue;
                                }
                                let kr = &kv.row(s0 + b2)[c0..c0 + dh];
                                let gqr = &mut gq.row_mut(s0 + a)[c0..c0 + dh];
                                for (x, &y) in gqr.iter_mut().zip(kr) {
                                    *x += gs * y;
                                }
                                let qr = &qv.row(s0 + a)[c0..c0 + dh];
                                let gkr = &mut gk.row_mut(s0 + b2)[c0..c0 + dh];
                                for (x, &y) in gkr.iter_mut().zip(qr) {
                                    *x += gs * y;
                                }
                            }
                        }
                    }
                }
                self.acc(g, *q, gq);
                self.acc(g, *k, gk);
                self.acc(g, *v, gv);
            }
            Op::SegScores { q, k, segs, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let mut gq = Tensor::zeros(qv.rows, qv.cols);
                let mut gk = Tensor::zeros(kv.rows, kv.cols);
                for (b, (s0, s1)) in segs.iter().enumerate() {
                    for i2 in s0..s1 {
                        let gs = gi.data[i2] * *scale;
                        for (x, &y) in gq.row_mut(b).iter_mut().zip(kv.row(i2)) {
                            *x += gs * y;
                        }
                        for (x, &y) in gk.row_mut(i2).iter_mut().zip(qv.row(b)) {
                            *x += gs * y;
                        }
                    }
                }
                self.acc(g, *q, gq);
                self.acc(g, *k, gk);
            }
            Op::SegSoftmax(s, segs) => {
                let w = out();
                let mut gs = Tensor::zeros(w.rows, 1);
                for (s0, s1) in segs.iter() {
                    let dotp: R = (s0..s1).map(|j| gi.data[j] * w.data[j]).sum();
                    for j in s0..s1 {
                        gs.data[j] = w.data[j] * (gi.data[j] - dotp);
                    }
                }
                self.acc(g, *s, gs);
            }
            Op::SegWeightedSum { w, v, segs } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let mut gw = Tensor::zeros(wv.rows, 1);
                let mut gv = Tensor::zeros(vv.rows, vv.cols);
                for (b, (s0, s1)) in segs.iter().enumerate() {
                    let go = gi.row(b);
                    for j in s0..s1 {
                        gw.data[j] = dot(go, vv.row(j));
                        let wj = wv.data[j];
                        for (x, &y) in gv.row_mut(j).iter_mut().zip(go) {
                            *x += wj * y;
                        }
                    }
                }
                self.acc(g, *w, gw);
                self.acc(g, *v, gv);
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                self.acc_with(g, *a, |ga| {
                    for r in 0..gi.rows {
                        for (x, &y) in ga.row_mut(r)[start..start + gi.cols].iter_mut().zip(gi.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let at = start * gi.cols;
                self.acc_with(g, *a, |ga| {
                    for (x, &y) in ga.data[at..at + gi.data.len()].iter_mut().zip(&gi.data) {
                        *x += y;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    let mut gp = Tensor::zeros(gi.rows, c);
                    for r in 0..gi.rows {
                        gp.row_mut(r).copy_from_slice(&gi.row(r)[at..at + c]);
                    }
                    at += c;
                    self.acc(g, p, gp);
                }
            }
            Op::ScatterRows(a, idx) => {
                let mut ga = Tensor::zeros(idx.len(), gi.cols);
                for (r, &j) in idx.iter().enumerate() {
                    ga.row_mut(r).copy_from_slice(gi.row(j));
                }
                self.acc(g, *a, ga);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = gi.data[0];
                let mut gl = Tensor::zeros(probs.rows, probs.cols);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == R::ZERO {
                        continue;
                    }
                    let f = s * w;
                    for (c, x) in gl.row_mut(r).iter_mut().enumerate() {
                        let onehot = if c == t { R::ONE } else { R::ZERO };
                        *x = f * (probs.at(r, c) - onehot);
                    }
                }
                self.acc(g, *logits, gl);
            }
            Op::SegSoftmaxCe {
                scores,
                segs,
                targets,
                weights,
                probs,
            } => {
                let s = gi.data[0];
                let mut gs = Tensor::zeros(probs.len(), 1);
                for (b, (s0, s1)) in segs.iter().enumerate() {
                    if weights[b] == R::ZERO {
                        continue;
                    }
                    let f = s * weights[b];
                    for j in s0..s1 {
                        let onehot = if j - s0 == targets[b] { R::ONE } else { R::ZERO };
                        gs.data[j] = f * (probs[j] - onehot);
                    }
                }
                self.acc(g, *scores, gs);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.acc(g, p, gi.clone());
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                let s = gi.data[0];
                self.acc(
                    g,
                    *a,
                    Tensor {
                        rows: r,
                        cols: c,
                        data: vec![s; r * c],
                    },
                );
            }
        }
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn log_prob<R: Real>(logits: &[R], t: usize) -> R {
    let m = logits.iter().copied().fold(logits[0], R::max);
    let z: R = logits.iter().map(|&x| (x - m).exp()).sum();
    logits[t] - m - z.ln()
}

fn block<R: Real>(t: &Tensor<R>, r0: usize, r1: usize, c0: usize, w: usize) -> Tensor<R> {
    let mut out = Tensor::zeros(r1 - r0, w);
    for r in r0..r1 {
        out.row_mut(r - r0).copy_from_slice(&t.row(r)[c0..c0 + w]);
    }
    out
}

fn put_block<R: Real>(dst: &mut Tensor<R>, src: &Tensor<R>, r0: usize, c0: usize) {
    for r in 0..src.rows {
        dst.row_mut(r0 + r)[c0..c0 + src.cols].copy_from_slice(src.row(r));
    }
}
