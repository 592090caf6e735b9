//! Finite-difference cases shared by the gradient tests and the acceptance
//! report. Each returns the number of entries checked.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uinav_core::agent::{AgentBatch, AgentNet, AgentTarget, ArgumentVocab};
use uinav_core::demo::{record, Demonstration, Oracle, Provenance};
use uinav_core::nn::{Encoder, GruCell, Init, LayerNorm, Linear, Mlp, ParamStore, Segments, Tape, Tensor};
use uinav_core::referee::{RefereeBatch, RefereeEpisode, RefereeNet};
use uinav_core::screen::{featurize_screen, FeatureMatrix};
use uinav_core::sim::{EpisodeConfig, SlotSplit, Suite};
use uinav_core::text::mask_or_unmasked;

use super::gradcheck;

pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear_into_softmax_cross_entropy() -> Result<usize, String> {
    let mut r = rng(1);
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "l", 5, 4, &mut r);
    ps.get_mut(lin.b).data.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
    let x = rand_tensor(&mut r, 3, 5);
    gradcheck(
        &ps,
        |t| {
            let xi = t.input(x.clone());
            let y = lin.forward(t, xi).unwrap();
            t.softmax_ce(y, &[0, 3, 1], &[1.0, 0.5, 2.0]).unwrap()
        },
        TOL,
        64,
    )
}

pub fn layernorm_with_learned_gain() -> Result<usize, String> {
    let mut r = rng(2);
    let mut ps = ParamStore::new();
    let inner = Linear::new(&mut ps, "in", 4, 6, &mut r);
    let ln = LayerNorm::new(&mut ps, "ln", 6, &mut r);
    ps.get_mut(ln.gamma).data.iter_mut().for_each(|g| *g = r.gen_range(0.5..1.5));
    ps.get_mut(ln.beta).data.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
    let x = rand_tensor(&mut r, 3, 4);
    let probe = rand_tensor(&mut r, 3, 6);
    gradcheck(
        &ps,
        |t| {
            let xi = t.input(x.clone());
            let h = inner.forward(t, xi).unwrap();
            let y = ln.forward(t, h).unwrap();
            let p = t.input(probe.clone());
            let m = t.mul(y, p).unwrap();
            t.sum_all(m)
        },
        TOL,
        64,
    )
}

pub fn elementwise_nonlinearities() -> Result<usize, String> {
    let mut r = rng(3);
    let mut ps = ParamStore::new();
    let a = ps.add("a", 3, 4, Init::Xavier, &mut r);
    let b = ps.add("b", 3, 4, Init::Xavier, &mut r);
    gradcheck(
        &ps,
        |t| {
            let (a, b) = (t.param(a), t.param(b));
            let s = t.sigmoid(a);
            let th = t.tanh(b);
            let m = t.mul(s, th).unwrap();
            let f = t.affine(m, 3.0, 0.25);
            // keep relu inputs away from the kink
            let sh = t.affine(a, 1.0, 0.05);
            let rl = t.relu(sh);
            let sum = t.add(f, rl).unwrap();
            let sq = t.mul(sum, sum).unwrap();
            t.sum_all(sq)
        },
        TOL,
        64,
    )
}

pub fn segmented_self_attention_over_ragged_batch() -> Result<usize, String> {
    let mut r = rng(4);
    let mut ps = ParamStore::new();
    let enc = Encoder::new(&mut ps, "enc", 6, 8, 2, 2, 12, &mut r);
    let segs = Arc::new(Segments::from_lengths(&[3, 1, 5]));
    let x = rand_tensor(&mut r, 9, 6);
    let probe = rand_tensor(&mut r, 9, 8);
    gradcheck(
        &ps,
        |t| {
            let xi = t.input(x.clone());
            let h = enc.forward(t, xi, &segs).unwrap();
            let p = t.input(probe.clone());
            let m = t.mul(h, p).unwrap();
            t.sum_all(m)
        },
        TOL,
        24,
    )
}

pub fn pointer_cross_attention_and_its_losses() -> Result<usize, String> {
    let mut r = rng(5);
    let mut ps = ParamStore::new();
    let keys = Linear::new(&mut ps, "k", 4, 6, &mut r);
    let vals = Linear::new(&mut ps, "v", 4, 6, &mut r);
    let query = Linear::new(&mut ps, "q", 3, 6, &mut r);
    let head = Mlp::new(&mut ps, "head", 6, 5, 3, &mut r);
    let segs = Arc::new(Segments::from_lengths(&[2, 4, 3]));
    let x = rand_tensor(&mut r, 9, 4);
    let u = rand_tensor(&mut r, 3, 3);
    gradcheck(
        &ps,
        |t| {
            let xi = t.input(x.clone());
            let ui = t.input(u.clone());
            let k = keys.forward(t, xi).unwrap();
            let v = vals.forward(t, xi).unwrap();
            let q = query.forward(t, ui).unwrap();
            let s = t.seg_scores(q, k, &segs, 1.0 / 6f64.sqrt()).unwrap();
            let w = t.seg_softmax(s, &segs).unwrap();
            let ctx = t.seg_weighted_sum(w, v, &segs).unwrap();
            let logits = head.forward(t, ctx).unwrap();
            let l1 = t.seg_softmax_ce(s, &segs, &[1, 3, 0], &[1.0, 1.0, 0.0]).unwrap();
            let l2 = t.softmax_ce(logits, &[2, 0, 1], &[1.0, 1.0, 1.0]).unwrap();
            t.sum(&[l1, l2]).unwrap()
        },
        TOL,
        64,
    )
}

pub fn column_and_row_plumbing() -> Result<usize, String> {
    let mut r = rng(6);
    let mut ps = ParamStore::new();
    let a = ps.add("a", 3, 4, Init::Xavier, &mut r);
    let b = ps.add("b", 3, 2, Init::Xavier, &mut r);
    let probe = rand_tensor(&mut r, 5, 3);
    gradcheck(
        &ps,
        |t| {
            let (a, b) = (t.param(a), t.param(b));
            let c = t.concat_cols(&[a, b]).unwrap();
            let s = t.slice_cols(c, 2, 3).unwrap();
            let sc = t.scatter_rows(s, &[4, 0, 2], 5).unwrap();
            let top = t.slice_rows(sc, 1, 3).unwrap();
            let sc = t.scatter_rows(top, &[0, 1, 2], 5).unwrap();
            let sc = t.add(sc, sc).unwrap();
            let p = t.input(probe.clone());
            let m = t.mul(sc, p).unwrap();
            let sq = t.mul(m, sc).unwrap();
            t.sum_all(sq)
        },
        TOL,
        64,
    )
}

pub fn gru_through_three_chained_steps() -> Result<usize, String> {
    let mut r = rng(7);
    let mut ps = ParamStore::new();
    let gru = GruCell::new(&mut ps, "gru", 3, 4, &mut r);
    for p in [gru.bz, gru.br, gru.bh] {
        ps.get_mut(p).data.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
    }
    let xs: Vec<_> = (0..3).map(|_| rand_tensor(&mut r, 2, 3)).collect();
    let h0 = rand_tensor(&mut r, 2, 4);
    let probe = rand_tensor(&mut r, 2, 4);
    gradcheck(
        &ps,
        |t| {
            let mut h = t.input(h0.clone());
            for x in &xs {
                let xi = t.input(x.clone());
                h = gru.step(t, xi, h).unwrap();
            }
            let p = t.input(probe.clone());
            let m = t.mul(h, p).unwrap();
            t.sum_all(m)
        },
        TOL,
        64,
    )
}

pub fn repeated_param_use_accumulates() -> Result<usize, String> {
    let mut r = rng(8);
    let mut ps = ParamStore::new();
    let w = ps.add("w", 3, 3, Init::Xavier, &mut r);
    let x = rand_tensor(&mut r, 2, 3);
    gradcheck(
        &ps,
        |t| {
            let xi = t.input(x.clone());
            let w1 = t.param(w);
            let h = t.matmul(xi, w1).unwrap();
            let h = t.tanh(h);
            let w2 = t.param(w);
            let y = t.matmul(h, w2).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq)
        },
        TOL,
        64,
    )
}

fn demos(tasks: &[(&str, u64)]) -> Vec<Demonstration> {
    let s = Suite::builtin();
    tasks
        .iter()
        .map(|(t, seed)| {
            let cfg = EpisodeConfig::sample(&s, t, *seed, SlotSplit::Train).unwrap();
            record(&s, cfg, &Oracle, Provenance::Oracle).unwrap()
        })
        .collect()
}

/// The whole agent, in f64, on a batch of real screens with every head's
/// loss active.
pub fn agent_network() -> Result<usize, String> {
    let s = Suite::builtin();
    let vocab = ArgumentVocab::new(&s.app_names());
    let net = AgentNet::new(vocab.clone(), 11);
    let mut feats: Vec<(FeatureMatrix, Vec<f32>)> = Vec::new();
    let mut targets = Vec::new();
    for d in demos(&[("compose_mail", 1), ("search_tube", 2)]) {
        let u = mask_or_unmasked(&d.config.utterance, &s.templates, true);
        for st in d.steps.iter().filter(|st| st.action.is_some()).take(2) {
            let tgt = AgentTarget::encode(st.action.as_ref().unwrap(), &st.screen, &u, &vocab).unwrap();
            feats.push((featurize_screen(&st.screen, &u), u.embed().to_vec()));
            targets.push(tgt);
        }
    }
    let items: Vec<(&FeatureMatrix, &[f32])> = feats.iter().map(|(f, u)| (f, u.as_slice())).collect();
    let b = AgentBatch::new(&items).map_err(|e| e.to_string())?;
    let ps: ParamStore<f64> = net.params.cast();
    let arch = net.arch().clone();
    gradcheck(&ps, |t: &mut Tape<'_, f64>| arch.loss(t, &b, &targets).unwrap().0, TOL, 3)
}

/// The whole referee over two episodes of different lengths.
pub fn referee_network() -> Result<usize, String> {
    let s = Suite::builtin();
    let net = RefereeNet::new(12);
    let mut eps = Vec::new();
    let mut labels = Vec::new();
    for d in demos(&[("compose_mail", 3), ("dark_mode_mail", 0), ("view_cart", 1)]) {
        let u = mask_or_unmasked(&d.config.utterance, &s.templates, true);
        eps.push(RefereeEpisode {
            screens: d.steps.iter().map(|st| featurize_screen(&st.screen, &u)).collect(),
            history: (0..d.steps.len()).map(|i| d.history(i)).collect(),
            utt: u.embed().to_vec(),
        });
        labels.push(d.steps.iter().map(|st| st.referee_label).collect::<Vec<_>>());
    }
    let weights: Vec<Vec<f64>> = labels.iter().map(|l| vec![0.5; l.len()]).collect();
    let refs: Vec<&RefereeEpisode> = eps.iter().collect();
    let b = RefereeBatch::new(&refs).map_err(|e| e.to_string())?;
    let ps: ParamStore<f64> = net.params.cast();
    let arch = net.arch().clone();
    gradcheck(&ps, |t: &mut Tape<'_, f64>| arch.loss(t, &b, &labels, &weights).unwrap(), TOL, 3)
}

/// Every case by name.
pub fn all() -> Vec<(&'static str, fn() -> Result<usize, String>)> {
    vec![
        ("linear + softmax CE", linear_into_softmax_cross_entropy),
        ("layernorm", layernorm_with_learned_gain),
        ("elementwise", elementwise_nonlinearities),
        ("segmented self-attention encoder", segmented_self_attention_over_ragged_batch),
        ("pointer attention + losses", pointer_cross_attention_and_its_losses),
        ("column/row plumbing", column_and_row_plumbing),
        ("GRU chain", gru_through_three_chained_steps),
        ("shared parameters", repeated_param_use_accumulates),
        ("agent network", agent_network),
        ("referee network", referee_network),
    ]
}
