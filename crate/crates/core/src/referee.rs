//! Recurrent completion judge. Each step cross-attends over the encoded
//! screen with a query built from the utterance and the previous action,
//! then feeds the context through a GRU that emits one of four labels.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionKind, ActionOutcome};
use crate::agent::{D_MODEL, D_FF, N_HEADS, N_LAYERS};
use crate::nn::{Encoder, GruCell, Linear, NnError, NodeId, ParamStore, Real, Segments, Tape, Tensor};
use crate::screen::{featurize_screen, FeatureMatrix, Screen};
use crate::sim::EnvVerdict;
use crate::text::MaskedUtterance;
use crate::{D_ELEM, D_TEXT};

pub const D_HIST: usize = 8;
pub const D_GRU: usize = 160;
pub const N_LABELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RefereeLabel {
    Successful,
    Failed,
    Pending,
    Infeasible,
}

impl RefereeLabel {
    pub const ALL: [RefereeLabel; 4] = [
        RefereeLabel::Successful,
        RefereeLabel::Failed,
        RefereeLabel::Pending,
        RefereeLabel::Infeasible,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RefereeLabel::Successful => "SUCCESSFUL",
            RefereeLabel::Failed => "FAILED",
            RefereeLabel::Pending => "PENDING",
            RefereeLabel::Infeasible => "INFEASIBLE",
        }
    }
}

impl From<EnvVerdict> for RefereeLabel {
    fn from(v: EnvVerdict) -> Self {
        match v {
            EnvVerdict::Success => RefereeLabel::Successful,
            EnvVerdict::Failure => RefereeLabel::Failed,
            EnvVerdict::Pending => RefereeLabel::Pending,
            EnvVerdict::Infeasible => RefereeLabel::Infeasible,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

pub fn feasibility_map(label: RefereeLabel) -> Feasibility {
    match label {
        RefereeLabel::Successful | RefereeLabel::Pending => Feasibility::Feasible,
        RefereeLabel::Failed | RefereeLabel::Infeasible => Feasibility::Infeasible,
    }
}

/// The last executed macro and whether it ended in a success state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionHistory {
    pub prev_kind: Option<ActionKind>,
    pub prev_succeeded: bool,
}

impl ActionHistory {
    pub fn after(kind: ActionKind, outcome: &ActionOutcome) -> Self {
        Self {
            prev_kind: Some(kind),
            prev_succeeded: outcome.succeeded(),
        }
    }

    pub fn to_vec(self) -> [f32; D_HIST] {
        let mut v = [0.0; D_HIST];
        if let Some(k) = self.prev_kind {
            v[k.index()] = 1.0;
            v[D_HIST - 1] = if self.prev_succeeded { 1.0 } else { 0.0 };
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefereeState {
    pub hidden: Vec<f32>,
    pub step_index: u32,
}

impl Default for RefereeState {
    fn default() -> Self {
        Self {
            hidden: vec![0.0; D_GRU],
            step_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefereeVerdict {
    pub label: RefereeLabel,
    pub probabilities: [f32; N_LABELS],
}

/// One episode as the referee consumes it: a screen and history per step.
#[derive(Clone, Debug)]
pub struct RefereeEpisode {
    pub screens: Vec<FeatureMatrix>,
    pub history: Vec<ActionHistory>,
    pub utt: Vec<f32>,
}

impl RefereeEpisode {
    pub fn len(&self) -> usize {
        self.screens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.screens.is_empty()
    }
}

/// Time-major stacked batch: row `t * B + b` is step `t` of episode `b`.
/// Episodes shorter than the longest are padded with a one-row zero screen.
#[derive(Clone, Debug)]
pub struct RefereeBatch {
    pub feats: Tensor<f32>,
    pub query_in: Tensor<f32>,
    pub hist: Tensor<f32>,
    pub segs: Arc<Segments>,
    pub h0: Tensor<f32>,
    pub n: usize,
    pub t_max: usize,
    pub lengths: Vec<usize>,
}

impl RefereeBatch {
    pub fn new(episodes: &[&RefereeEpisode]) -> Result<Self, NnError> {
        let n = episodes.len();
        let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut seg_len = Vec::with_capacity(n * t_max);
        let mut feats = Vec::new();
        let mut query_in = Vec::with_capacity(n * t_max * (D_TEXT + D_HIST));
        let mut hist = Vec::with_capacity(n * t_max * D_HIST);
        for t in 0..t_max {
            for e in episodes {
                if e.screens.len() != e.history.len() || e.utt.len() != D_TEXT {
                    return Err(NnError::ShapeMismatch("referee episode parts disagree".into()));
                }
                let h = e.history.get(t).copied().unwrap_or_default().to_vec();
                match e.screens.get(t) {
                    Some(fm) if fm.rows > 0 => {
                        seg_len.push(fm.rows);
                        feats.extend_from_slice(&fm.data);
                    }
                    _ => {
                        seg_len.push(1);
                        feats.extend(std::iter::repeat(0.0).take(D_ELEM));
                    }
                }
                query_in.extend_from_slice(&e.utt);
                query_in.extend_from_slice(&h);
                hist.extend_from_slice(&h);
            }
        }
        let total = seg_len.iter().sum();
        Ok(Self {
            feats: Tensor::from_vec(total, D_ELEM, feats)?,
            query_in: Tensor::from_vec(n * t_max, D_TEXT + D_HIST, query_in)?,
            hist: Tensor::from_vec(n * t_max, D_HIST, hist)?,
            segs: Arc::new(Segments::from_lengths(&seg_len)),
            h0: Tensor::zeros(n, D_GRU),
            n,
            t_max,
            lengths: episodes.iter().map(|e| e.len()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RefereeArch {
    encoder: Encoder,
    query: Linear,
    key: Linear,
    value: Linear,
    gru: GruCell,
    out: Linear,
}

impl RefereeArch {
    pub fn build<R: Real>(ps: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: Encoder::new(ps, "enc", D_ELEM, D_MODEL, N_LAYERS, N_HEADS, D_FF, rng),
            query: Linear::new(ps, "dec.query", D_TEXT + D_HIST, D_MODEL, rng),
            key: Linear::new(ps, "dec.key", D_MODEL, D_MODEL, rng),
            value: Linear::new(ps, "dec.value", D_MODEL, D_MODEL, rng),
            gru: GruCell::new(ps, "gru", D_MODEL + D_HIST, D_GRU, rng),
            out: Linear::new(ps, "out", D_GRU, N_LABELS, rng),
        }
    }

    /// Returns per-step logits (time-major, `B` rows each) and the final
    /// hidden state.
    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, b: &RefereeBatch) -> Result<(Vec<NodeId>, NodeId), NnError> {
        let x = t.input(b.feats.cast());
        let qi = t.input(b.query_in.cast());
        let hist = t.input(b.hist.cast());
        let enc = self.encoder.forward(t, x, &b.segs)?;
        let q = self.query.forward(t, qi)?;
        let k = self.key.forward(t, enc)?;
        let v = self.value.forward(t, enc)?;
        let s = t.seg_scores(q, k, &b.segs, 1.0 / (D_MODEL as f64).sqrt())?;
        let w = t.seg_softmax(s, &b.segs)?;
        let ctx = t.seg_weighted_sum(w, v, &b.segs)?;
        let step_in = t.concat_cols(&[ctx, hist])?;
        let mut h = t.input(b.h0.cast());
        let mut logits = Vec::with_capacity(b.t_max);
        for step in 0..b.t_max {
            let xt = t.slice_rows(step_in, step * b.n, b.n)?;
            h = self.gru.step(t, xt, h)?;
            logits.push(self.out.forward(t, h)?);
        }
        Ok((logits, h))
    }

    /// Weighted sequence cross-entropy. `labels[b][t]` and `weights[b][t]`
    /// cover each episode's real steps; padded steps carry no loss.
    pub fn loss<R: Real>(
        &self,
        t: &mut Tape<'_, R>,
        b: &RefereeBatch,
        labels: &[Vec<RefereeLabel>],
        weights: &[Vec<f64>],
    ) -> Result<NodeId, NnError> {
        if labels.len() != b.n || weights.len() != b.n {
            return Err(NnError::ShapeMismatch("referee labels disagree with batch".into()));
        }
        let (logits, _) = self.forward(t, b)?;
        let mut parts = Vec::with_capacity(logits.len());
        for (step, &l) in logits.iter().enumerate() {
            let tg: Vec<usize> = labels
                .iter()
                .map(|ls| ls.get(step).map_or(0, |x| x.index()))
                .collect();
            let w: Vec<f64> = weights.iter().map(|ws| ws.get(step).copied().unwrap_or(0.0)).collect();
            parts.push(t.softmax_ce(l, &tg, &w)?);
        }
        t.sum(&parts)
    }
}

#[derive(Clone, Debug)]
pub struct RefereeNet {
    pub params: ParamStore<f32>,
    arch: RefereeArch,
}

fn verdict_from(logits: &[f32]) -> RefereeVerdict {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut p = [0.0f32; N_LABELS];
    let mut z = 0.0;
    for (pi, &l) in p.iter_mut().zip(logits) {
        *pi = (l - m).exp();
        z += *pi;
    }
    p.iter_mut().for_each(|x| *x /= z);
    let mut best = 0;
    for i in 1..N_LABELS {
        if p[i] > p[best] {
            best = i;
        }
    }
    RefereeVerdict {
        label: RefereeLabel::ALL[best],
        probabilities: p,
    }
}

impl RefereeNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = RefereeArch::build(&mut params, &mut rng);
        Self { params, arch }
    }

    pub fn from_params(params: ParamStore<f32>) -> Result<Self, NnError> {
        let mut fresh = Self::new(0);
        fresh.params.load_from(&params)?;
        Ok(fresh)
    }

    pub fn arch(&self) -> &RefereeArch {
        &self.arch
    }

    /// Verdicts for every real step of a batch, per episode.
    pub fn predict_batch(&self, b: &RefereeBatch) -> Result<Vec<Vec<RefereeVerdict>>, NnError> {
        let mut t = Tape::new(&self.params);
        let (logits, _) = self.arch.forward(&mut t, b)?;
        let mut out: Vec<Vec<RefereeVerdict>> = b.lengths.iter().map(|&l| Vec::with_capacity(l)).collect();
        for (step, &l) in logits.iter().enumerate() {
            let lv = t.value(l);
            for (e, o) in out.iter_mut().enumerate() {
                if step < b.lengths[e] {
                    o.push(verdict_from(lv.row(e)));
                }
            }
        }
        Ok(out)
    }

    /// One step of the recurrence from an explicit state.
    pub fn step(
        &self,
        screen: &Screen,
        u: &MaskedUtterance,
        hist: ActionHistory,
        state: &RefereeState,
    ) -> Result<(RefereeVerdict, RefereeState), NnError> {
        if state.hidden.len() != D_GRU {
            return Err(NnError::ShapeMismatch(format!("hidden of {}", state.hidden.len())));
        }
        let ep = RefereeEpisode {
            screens: vec![featurize_screen(screen, u)],
            history: vec![hist],
            utt: u.embed().to_vec(),
        };
        let mut b = RefereeBatch::new(&[&ep])?;
        b.h0 = Tensor::from_vec(1, D_GRU, state.hidden.clone())?;
        let mut t = Tape::new(&self.params);
        let (logits, h) = self.arch.forward(&mut t, &b)?;
        let verdict = verdict_from(t.value(logits[0]).row(0));
        let next = RefereeState {
            hidden: t.value(h).data.clone(),
            step_index: state.step_index + 1,
        };
        Ok((verdict, next))
    }
}

/// Decides when an episode ends from the referee's verdict stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terminator {
    pub max_steps: u32,
}

impl Terminator {
    /// `step` counts verdicts seen so far, starting at 1. The first
    /// non-pending verdict ends the episode; so does reaching `max_steps`,
    /// which counts as a failure.
    pub fn observe(&self, step: u32, label: RefereeLabel) -> Option<RefereeLabel> {
        match label {
            RefereeLabel::Pending if step >= self.max_steps => Some(RefereeLabel::Failed),
            RefereeLabel::Pending => None,
            other => Some(other),
        }
    }
}

/// Step (1-based) and outcome at which the stream terminates, if it does.
pub fn episode_terminator(
    stream: impl IntoIterator<Item = RefereeLabel>,
    max_steps: u32,
) -> Option<(u32, RefereeLabel)> {
    let term = Terminator { max_steps };
    for (i, l) in stream.into_iter().enumerate() {
        let step = i as u32 + 1;
        if let Some(outcome) = term.observe(step, l) {
            return Some((step, outcome));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::fixtures::element;
    use crate::screen::ElemType;
    use RefereeLabel::*;

    #[test]
    fn feasibility_buckets() {
        assert_eq!(feasibility_map(Successful), Feasibility::Feasible);
        assert_eq!(feasibility_map(Pending), Feasibility::Feasible);
        assert_eq!(feasibility_map(Failed), Feasibility::Infeasible);
        assert_eq!(feasibility_map(Infeasible), Feasibility::Infeasible);
    }

    #[test]
    fn terminator_examples() {
        assert_eq!(episode_terminator([Pending, Pending, Successful], 20), Some((3, Successful)));
        assert_eq!(episode_terminator(vec![Pending; 5], 5), Some((5, Failed)));
        assert_eq!(episode_terminator([Infeasible], 20), Some((1, Infeasible)));
        assert_eq!(episode_terminator([Pending, Pending], 20), None);
    }

    #[test]
    fn history_vector_layout() {
        assert_eq!(ActionHistory::default().to_vec(), [0.0; D_HIST]);
        let h = ActionHistory {
            prev_kind: Some(ActionKind::Scroll),
            prev_succeeded: true,
        };
        let v = h.to_vec();
        assert_eq!(v[ActionKind::Scroll.index()], 1.0);
        assert_eq!(v[D_HIST - 1], 1.0);
        assert_eq!(v.iter().sum::<f32>(), 2.0);
    }

    #[test]
    fn parameter_count_is_in_budget() {
        let n = RefereeNet::new(0).params.count();
        assert!((350_000..=520_000).contains(&n), "{n}");
    }

    fn screens() -> Vec<Screen> {
        (0..3)
            .map(|i| {
                let els = (0..=i)
                    .map(|j| element(&format!("e{j}"), ElemType::Button, &format!("item {j}"), [0.1, 0.1 * j as f32, 0.5, 0.1 * j as f32 + 0.05]))
                    .collect();
                Screen::new(format!("A/s{i}"), true, els)
            })
            .collect()
    }

    #[test]
    fn stepping_matches_the_sequence_forward() {
        let net = RefereeNet::new(9);
        let u = MaskedUtterance::new(None, "open <slot_0>".into(), vec!["x".into()]);
        let hs = [
            ActionHistory::default(),
            ActionHistory {
                prev_kind: Some(ActionKind::Click),
                prev_succeeded: true,
            },
            ActionHistory {
                prev_kind: Some(ActionKind::Back),
                prev_succeeded: false,
            },
        ];
        let scr = screens();
        let ep = RefereeEpisode {
            screens: scr.iter().map(|s| featurize_screen(s, &u)).collect(),
            history: hs.to_vec(),
            utt: u.embed().to_vec(),
        };
        let other = RefereeEpisode {
            screens: ep.screens[..1].to_vec(),
            history: hs[..1].to_vec(),
            utt: u.embed().to_vec(),
        };
        let b = RefereeBatch::new(&[&other, &ep]).unwrap();
        let seq = net.predict_batch(&b).unwrap();
        assert_eq!(seq[0].len(), 1);
        let mut state = RefereeState::default();
        for (i, s) in scr.iter().enumerate() {
            let (v, next) = net.step(s, &u, hs[i], &state).unwrap();
            for (a, b) in v.probabilities.iter().zip(&seq[1][i].probabilities) {
                assert!((a - b).abs() < 1e-5);
            }
            let total: f32 = v.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            state = next;
        }
        assert_eq!(state.step_index, 3);
    }
}
