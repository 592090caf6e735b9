//! Encoder-decoder agent: a Transformer encoder over element features, one
//! cross-attention step queried by the utterance embedding, and two heads
//! for the action kind and its argument.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionKind, Direction, MacroAction};
use crate::nn::{Encoder, Linear, Mlp, NnError, NodeId, ParamStore, Real, Segments, Tape, Tensor};
use crate::screen::{featurize_screen, FeatureMatrix, Screen};
use crate::text::MaskedUtterance;
use crate::{D_ELEM, D_TEXT, K_ENT};

pub const D_MODEL: usize = 128;
pub const N_LAYERS: usize = 2;
pub const N_HEADS: usize = 4;
pub const D_FF: usize = 256;
pub const D_HEAD_HIDDEN: usize = 128;
pub const N_KINDS: usize = 7;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("screen has no elements")]
    EmptyScreen,
    #[error("no kind-compatible argument for {0}")]
    InvalidArgument(String),
}

/// One symbol of the argument head's output space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ArgSymbol {
    None,
    Entity { k: usize, enter: bool },
    Scroll(Direction),
    App(usize),
}

impl ArgSymbol {
    fn compatible(&self, kind: ActionKind) -> bool {
        match self {
            ArgSymbol::None => matches!(
                kind,
                ActionKind::Click | ActionKind::Dismiss | ActionKind::Wait | ActionKind::Back
            ),
            ArgSymbol::Entity { .. } => kind == ActionKind::FocusAndType,
            ArgSymbol::Scroll(_) => kind == ActionKind::Scroll,
            ArgSymbol::App(_) => kind == ActionKind::OpenApp,
        }
    }
}

/// Ordered argument vocabulary, fixed for a training run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentVocab {
    symbols: Vec<String>,
    apps: Vec<String>,
}

impl ArgumentVocab {
    pub fn new(app_names: &[String]) -> Self {
        let mut symbols = vec!["none".to_owned()];
        symbols.extend((0..K_ENT).map(|k| format!("entity_{k}")));
        symbols.extend((0..K_ENT).map(|k| format!("entity_{k}_enter")));
        symbols.extend(Direction::ALL.iter().map(|d| format!("scroll_{}", d.as_str())));
        symbols.extend((0..app_names.len()).map(|k| format!("app_{k}")));
        Self {
            symbols,
            apps: app_names.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn apps(&self) -> &[String] {
        &self.apps
    }

    pub fn symbol(&self, i: usize) -> ArgSymbol {
        let ents = 1 + 2 * K_ENT;
        match i {
            0 => ArgSymbol::None,
            i if i < 1 + K_ENT => ArgSymbol::Entity { k: i - 1, enter: false },
            i if i < ents => ArgSymbol::Entity {
                k: i - 1 - K_ENT,
                enter: true,
            },
            i if i < ents + 4 => ArgSymbol::Scroll(Direction::ALL[i - ents]),
            i => ArgSymbol::App(i - ents - 4),
        }
    }

    pub fn index_of(&self, s: &ArgSymbol) -> Option<usize> {
        let ents = 1 + 2 * K_ENT;
        match *s {
            ArgSymbol::None => Some(0),
            ArgSymbol::Entity { k, enter } if k < K_ENT => Some(1 + k + if enter { K_ENT } else { 0 }),
            ArgSymbol::Entity { .. } => None,
            ArgSymbol::Scroll(d) => Some(ents + d as usize),
            ArgSymbol::App(k) if k < self.apps.len() => Some(ents + 4 + k),
            ArgSymbol::App(_) => None,
        }
    }

    /// Whether symbol `i` can be materialized for `kind` given the utterance.
    fn usable(&self, i: usize, kind: ActionKind, u: &MaskedUtterance) -> bool {
        let s = self.symbol(i);
        s.compatible(kind)
            && match s {
                ArgSymbol::Entity { k, .. } => k < u.entities.len(),
                _ => true,
            }
    }

    /// Argument symbol a gold action maps to, if it is expressible.
    pub fn encode(&self, a: &MacroAction, u: &MaskedUtterance) -> Option<usize> {
        let s = match a.kind {
            ActionKind::Click | ActionKind::Dismiss | ActionKind::Wait | ActionKind::Back => ArgSymbol::None,
            ActionKind::FocusAndType => {
                let text = a.argument.as_deref()?;
                let k = u.entities.iter().take(K_ENT).position(|e| e == text)?;
                ArgSymbol::Entity {
                    k,
                    enter: a.press_enter,
                }
            }
            ActionKind::Scroll => ArgSymbol::Scroll(Direction::parse(a.argument.as_deref()?)?),
            ActionKind::OpenApp => {
                let name = a.argument.as_deref()?;
                ArgSymbol::App(self.apps.iter().position(|n| n == name)?)
            }
        };
        self.index_of(&s)
    }
}

/// Output of one forward pass over one screen.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPrediction {
    pub element_index: usize,
    pub element_weights: Vec<f32>,
    pub action_kind: Vec<f32>,
    pub argument: Vec<f32>,
}

/// Gold targets for one training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentTarget {
    pub element: Option<usize>,
    pub kind: usize,
    pub argument: usize,
}

impl AgentTarget {
    pub fn encode(a: &MacroAction, screen: &Screen, u: &MaskedUtterance, vocab: &ArgumentVocab) -> Option<Self> {
        let element = match &a.element_id {
            Some(id) if a.kind.is_element_action() => Some(screen.index_of(id)?),
            _ => None,
        };
        Some(Self {
            element,
            kind: a.kind.index(),
            argument: vocab.encode(a, u)?,
        })
    }
}

/// Stacked inputs for a batch of screens.
#[derive(Clone, Debug)]
pub struct AgentBatch {
    pub feats: Tensor<f32>,
    pub utt: Tensor<f32>,
    pub segs: Arc<Segments>,
}

impl AgentBatch {
    pub fn new(items: &[(&FeatureMatrix, &[f32])]) -> Result<Self, AgentError> {
        let mut lengths = Vec::with_capacity(items.len());
        let mut feats = Vec::new();
        let mut utt = Vec::with_capacity(items.len() * D_TEXT);
        for (fm, u) in items {
            if fm.rows == 0 {
                return Err(AgentError::EmptyScreen);
            }
            if u.len() != D_TEXT {
                return Err(NnError::ShapeMismatch(format!("utterance embedding of {}", u.len())).into());
            }
            lengths.push(fm.rows);
            feats.extend_from_slice(&fm.data);
            utt.extend_from_slice(u);
        }
        let total = lengths.iter().sum();
        Ok(Self {
            feats: Tensor::from_vec(total, D_ELEM, feats)?,
            utt: Tensor::from_vec(items.len(), D_TEXT, utt)?,
            segs: Arc::new(Segments::from_lengths(&lengths)),
        })
    }

    pub fn len(&self) -> usize {
        self.segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }
}

/// Graph nodes produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AgentNodes {
    pub scores: NodeId,
    pub weights: NodeId,
    pub kind_logits: NodeId,
    pub arg_logits: NodeId,
}

/// Layer wiring, independent of the scalar type of the parameters.
#[derive(Clone, Debug)]
pub struct AgentArch {
    encoder: Encoder,
    query: Linear,
    key: Linear,
    value: Linear,
    kind_head: Mlp,
    arg_head: Mlp,
}

impl AgentArch {
    pub fn build<R: Real>(ps: &mut ParamStore<R>, n_args: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: Encoder::new(ps, "enc", D_ELEM, D_MODEL, N_LAYERS, N_HEADS, D_FF, rng),
            query: Linear::new(ps, "dec.query", D_TEXT, D_MODEL, rng),
            key: Linear::new(ps, "dec.key", D_MODEL, D_MODEL, rng),
            value: Linear::new(ps, "dec.value", D_MODEL, D_MODEL, rng),
            kind_head: Mlp::new(ps, "head.kind", D_MODEL, D_HEAD_HIDDEN, N_KINDS, rng),
            arg_head: Mlp::new(ps, "head.arg", D_MODEL, D_HEAD_HIDDEN, n_args, rng),
        }
    }

    pub fn forward<R: Real>(&self, t: &mut Tape<'_, R>, b: &AgentBatch) -> Result<AgentNodes, NnError> {
        let x = t.input(b.feats.cast());
        let u = t.input(b.utt.cast());
        let h = self.encoder.forward(t, x, &b.segs)?;
        let q = self.query.forward(t, u)?;
        let k = self.key.forward(t, h)?;
        let v = self.value.forward(t, h)?;
        let scores = t.seg_scores(q, k, &b.segs, 1.0 / (D_MODEL as f64).sqrt())?;
        let weights = t.seg_softmax(scores, &b.segs)?;
        let ctx = t.seg_weighted_sum(weights, v, &b.segs)?;
        let kind_logits = self.kind_head.forward(t, ctx)?;
        let arg_logits = self.arg_head.forward(t, ctx)?;
        Ok(AgentNodes {
            scores,
            weights,
            kind_logits,
            arg_logits,
        })
    }

    /// Equal-weight sum of the three cross-entropies, averaged over the
    /// batch. Element CE is taken directly on the cross-attention weights and
    /// skipped for actions without an element.
    pub fn loss<R: Real>(
        &self,
        t: &mut Tape<'_, R>,
        b: &AgentBatch,
        targets: &[AgentTarget],
    ) -> Result<(NodeId, AgentNodes), NnError> {
        if targets.len() != b.len() {
            return Err(NnError::ShapeMismatch(format!("{} targets for {} samples", targets.len(), b.len())));
        }
        let nodes = self.forward(t, b)?;
        let inv = 1.0 / b.len() as f64;
        let el_t: Vec<usize> = targets.iter().map(|g| g.element.unwrap_or(0)).collect();
        let el_w: Vec<f64> = targets.iter().map(|g| if g.element.is_some() { inv } else { 0.0 }).collect();
        let kinds: Vec<usize> = targets.iter().map(|g| g.kind).collect();
        let args: Vec<usize> = targets.iter().map(|g| g.argument).collect();
        let w = vec![inv; b.len()];
        let l_el = t.seg_softmax_ce(nodes.scores, &b.segs, &el_t, &el_w)?;
        let l_kind = t.softmax_ce(nodes.kind_logits, &kinds, &w)?;
        let l_arg = t.softmax_ce(nodes.arg_logits, &args, &w)?;
        Ok((t.sum(&[l_el, l_kind, l_arg])?, nodes))
    }
}

/// Trained or freshly initialized agent.
#[derive(Clone, Debug)]
pub struct AgentNet {
    pub params: ParamStore<f32>,
    pub vocab: ArgumentVocab,
    arch: AgentArch,
}

fn softmax_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows)
        .map(|r| {
            let row = t.row(r);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f32 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl AgentNet {
    pub fn new(vocab: ArgumentVocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = AgentArch::build(&mut params, vocab.len(), &mut rng);
        Self { params, vocab, arch }
    }

    /// Rebuilds the wiring around loaded parameters.
    pub fn from_params(vocab: ArgumentVocab, params: ParamStore<f32>) -> Result<Self, AgentError> {
        let mut fresh = Self::new(vocab, 0);
        fresh.params.load_from(&params)?;
        Ok(fresh)
    }

    pub fn arch(&self) -> &AgentArch {
        &self.arch
    }

    pub fn predict_batch(&self, b: &AgentBatch) -> Result<Vec<AgentPrediction>, AgentError> {
        let mut t = Tape::new(&self.params);
        let nodes = self.arch.forward(&mut t, b)?;
        let w = t.value(nodes.weights);
        let kinds = softmax_rows(t.value(nodes.kind_logits));
        let args = softmax_rows(t.value(nodes.arg_logits));
        Ok(b
            .segs
            .iter()
            .zip(kinds.into_iter().zip(args))
            .map(|((s0, s1), (action_kind, argument))| {
                let element_weights = w.data[s0..s1].to_vec();
                AgentPrediction {
                    element_index: argmax(&element_weights),
                    element_weights,
                    action_kind,
                    argument,
                }
            })
            .collect())
    }

    pub fn predict(&self, screen: &Screen, u: &MaskedUtterance) -> Result<AgentPrediction, AgentError> {
        let fm = featurize_screen(screen, u);
        let b = AgentBatch::new(&[(&fm, u.embed())])?;
        Ok(self.predict_batch(&b)?.remove(0))
    }

    /// Forward over an `N_max`-padded feature matrix; rows with
    /// `mask[i] == false` are padding and get exactly zero weight.
    pub fn predict_masked(&self, feats: &FeatureMatrix, mask: &[bool], utt: &[f32]) -> Result<AgentPrediction, AgentError> {
        if mask.len() != feats.rows {
            return Err(NnError::ShapeMismatch(format!("mask of {} for {} rows", mask.len(), feats.rows)).into());
        }
        let keep: Vec<usize> = (0..feats.rows).filter(|&i| mask[i]).collect();
        let mut data = Vec::with_capacity(keep.len() * D_ELEM);
        for &i in &keep {
            data.extend_from_slice(feats.row(i));
        }
        let real = FeatureMatrix { rows: keep.len(), data };
        let b = AgentBatch::new(&[(&real, utt)])?;
        let mut p = self.predict_batch(&b)?.remove(0);
        let mut weights = vec![0.0; feats.rows];
        for (w, &i) in p.element_weights.iter().zip(&keep) {
            weights[i] = *w;
        }
        p.element_index = keep[p.element_index];
        p.element_weights = weights;
        Ok(p)
    }

    pub fn act(&self, screen: &Screen, u: &MaskedUtterance) -> Result<MacroAction, AgentError> {
        let p = self.predict(screen, u)?;
        decode_action(&p, screen, u, &self.vocab)
    }
}

/// Turns a prediction into a macro action. Kinds are tried in order of
/// probability; the argument is the most probable symbol compatible with
/// the kind. A kind with no usable argument (typing with no entities) is
/// skipped.
pub fn decode_action(
    p: &AgentPrediction,
    screen: &Screen,
    u: &MaskedUtterance,
    vocab: &ArgumentVocab,
) -> Result<MacroAction, AgentError> {
    let mut kinds: Vec<usize> = (0..p.action_kind.len()).collect();
    kinds.sort_by(|&a, &b| p.action_kind[b].total_cmp(&p.action_kind[a]).then(a.cmp(&b)));
    for ki in kinds {
        let kind = ActionKind::ALL[ki];
        if kind.is_element_action() && p.element_index >= screen.elements.len() {
            continue;
        }
        let best = (0..vocab.len())
            .filter(|&i| vocab.usable(i, kind, u))
            .max_by(|&a, &b| p.argument[a].total_cmp(&p.argument[b]).then(b.cmp(&a)));
        let Some(ai) = best else { continue };
        let element = || screen.elements[p.element_index].id.as_str();
        let action = match (kind, vocab.symbol(ai)) {
            (ActionKind::Click, _) => MacroAction::click(element()),
            (ActionKind::Dismiss, _) => MacroAction::dismiss(element()),
            (ActionKind::Wait, _) => MacroAction::wait(),
            (ActionKind::Back, _) => MacroAction::back(),
            (ActionKind::FocusAndType, ArgSymbol::Entity { k, enter }) => {
                MacroAction::focus_and_type(element(), &u.entities[k], enter)
            }
            (ActionKind::Scroll, ArgSymbol::Scroll(d)) => MacroAction::scroll(d),
            (ActionKind::OpenApp, ArgSymbol::App(k)) => MacroAction::open_app(&vocab.apps[k]),
            (kind, sym) => unreachable!("{sym:?} was filtered as usable for {kind:?}"),
        };
        return Ok(action);
    }
    Err(AgentError::InvalidArgument("every action kind".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::fixtures::element;
    use crate::screen::ElemType;

    fn vocab() -> ArgumentVocab {
        ArgumentVocab::new(&["Mail".into(), "Settings".into(), "Shop".into(), "Tube".into()])
    }

    fn pred(kind: ActionKind, arg: usize, n_args: usize) -> AgentPrediction {
        let mut action_kind = vec![0.0; N_KINDS];
        action_kind[kind.index()] = 1.0;
        let mut argument = vec![0.0; n_args];
        argument[arg] = 1.0;
        AgentPrediction {
            element_index: 0,
            element_weights: vec![1.0],
            action_kind,
            argument,
        }
    }

    fn screen() -> Screen {
        Screen::new("A/s", true, vec![element("box", ElemType::TextField, "", [0.1, 0.1, 0.9, 0.2])])
    }

    #[test]
    fn vocab_symbols_round_trip_through_indices() {
        let v = vocab();
        assert_eq!(v.len(), 1 + 2 * K_ENT + 4 + 4);
        for i in 0..v.len() {
            assert_eq!(v.index_of(&v.symbol(i)), Some(i));
        }
        assert_eq!(v.symbols()[v.len() - 1], "app_3");
    }

    #[test]
    fn wait_decodes_without_element_or_argument() {
        let v = vocab();
        let u = MaskedUtterance::new(None, "x".into(), vec![]);
        let a = decode_action(&pred(ActionKind::Wait, 0, v.len()), &screen(), &u, &v).unwrap();
        assert_eq!(a, MacroAction::wait());
    }

    #[test]
    fn typing_materializes_the_entity_verbatim() {
        let v = vocab();
        let u = MaskedUtterance::new(None, "search for <slot_0>".into(), vec!["tiktok".into()]);
        let ai = v.index_of(&ArgSymbol::Entity { k: 0, enter: false }).unwrap();
        let a = decode_action(&pred(ActionKind::FocusAndType, ai, v.len()), &screen(), &u, &v).unwrap();
        assert_eq!(a, MacroAction::focus_and_type("box", "tiktok", false));
    }

    #[test]
    fn open_app_looks_up_the_registry_slot() {
        let v = vocab();
        let u = MaskedUtterance::new(None, "x".into(), vec![]);
        let ai = v.index_of(&ArgSymbol::App(2)).unwrap();
        let a = decode_action(&pred(ActionKind::OpenApp, ai, v.len()), &screen(), &u, &v).unwrap();
        assert_eq!(a, MacroAction::open_app("Shop"));
    }

    #[test]
    fn incompatible_argument_is_resolved_by_constrained_argmax() {
        let v = vocab();
        let u = MaskedUtterance::new(None, "x".into(), vec![]);
        let scroll = v.index_of(&ArgSymbol::Scroll(Direction::Up)).unwrap();
        let mut p = pred(ActionKind::Click, scroll, v.len());
        p.argument[0] = 0.1;
        let a = decode_action(&p, &screen(), &u, &v).unwrap();
        assert_eq!(a, MacroAction::click("box"));
    }

    #[test]
    fn typing_without_entities_falls_to_next_kind() {
        let v = vocab();
        let u = MaskedUtterance::new(None, "x".into(), vec![]);
        let mut p = pred(ActionKind::FocusAndType, 1, v.len());
        p.action_kind[ActionKind::Back.index()] = 0.5;
        assert_eq!(decode_action(&p, &screen(), &u, &v).unwrap(), MacroAction::back());
    }

    #[test]
    fn gold_actions_encode_to_their_symbols() {
        let v = vocab();
        let u = MaskedUtterance::new(None, "x".into(), vec!["a".into(), "b".into()]);
        let s = screen();
        let t = AgentTarget::encode(&MacroAction::focus_and_type("box", "b", true), &s, &u, &v).unwrap();
        assert_eq!(t.element, Some(0));
        assert_eq!(v.symbol(t.argument), ArgSymbol::Entity { k: 1, enter: true });
        let t = AgentTarget::encode(&MacroAction::scroll(Direction::Down), &s, &u, &v).unwrap();
        assert_eq!((t.element, v.symbol(t.argument)), (None, ArgSymbol::Scroll(Direction::Down)));
        assert!(AgentTarget::encode(&MacroAction::focus_and_type("box", "zzz", false), &s, &u, &v).is_none());
        assert!(AgentTarget::encode(&MacroAction::click("gone"), &s, &u, &v).is_none());
    }

    #[test]
    fn parameter_count_is_in_budget() {
        let net = AgentNet::new(vocab(), 0);
        let n = net.params.count();
        assert!((250_000..=400_000).contains(&n), "{n}");
    }

    #[test]
    fn single_element_screen_gets_all_the_weight() {
        let net = AgentNet::new(vocab(), 1);
        let u = MaskedUtterance::new(None, "search".into(), vec![]);
        let p = net.predict(&screen(), &u).unwrap();
        assert_eq!(p.element_weights, vec![1.0]);
        assert_eq!(p.element_index, 0);
    }
}
