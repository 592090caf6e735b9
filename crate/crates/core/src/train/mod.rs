//! Training loops, evaluation and the experiments built on them.

mod eval;
mod experiment;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::MacroAction;
use crate::agent::{decode_action, AgentBatch, AgentError, AgentNet, AgentTarget};
use crate::demo::{augment, augment_screen, Demonstration};
use crate::nn::{AdamState, NnError, Tape};
use crate::referee::{RefereeBatch, RefereeEpisode, RefereeLabel, RefereeNet, N_LABELS};
use crate::screen::{featurize_screen, FeatureMatrix, Screen};
use crate::sim::Suite;
use crate::text::{mask_or_unmasked, MaskedUtterance};

pub use eval::{
    eval_agent, eval_referee, heldout_configs, train_configs, EvalReport, RefereeReport, TaskStats, HELDOUT_SEED_BASE,
};
pub use experiment::{
    ablation_augmentation, ablation_masking, experiment_multitask, oracle_pool, run_loop, AblationReport, CurvePoint,
    LoopConfig, LoopReport, LoopRound, MultitaskReport, SmallBudget,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("the demonstration pool holds no usable samples")]
    EmptyPool,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Demo(#[from] crate::demo::DemoError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Agent,
    Referee,
}

/// Optimizer and schedule settings. Defaults follow the paper; every field
/// can be overridden from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub batch: usize,
    /// Samples (agent) seen by an initial run.
    pub budget: usize,
    /// Samples added by each incremental run.
    pub incremental: usize,
    /// Epoch cap (referee).
    pub max_epochs: usize,
    /// Evaluate after this many samples.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub masking: bool,
    /// Stored copies per demonstration for the referee, the first unchanged.
    pub referee_copies: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::agent()
    }
}

impl TrainConfig {
    pub fn agent() -> Self {
        Self {
            mode: Mode::Agent,
            lr: 1e-3,
            batch: 256,
            budget: 100_000,
            incremental: 20_000,
            max_epochs: 30,
            eval_every: 2_000,
            patience: 5,
            seed: 0,
            augment: true,
            masking: true,
            referee_copies: 10,
        }
    }

    pub fn referee() -> Self {
        Self {
            mode: Mode::Referee,
            batch: 128,
            ..Self::agent()
        }
    }
}

/// What a training run did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples_seen: usize,
    pub updates: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub stopped_early: bool,
    /// `(samples_seen, mean loss since the last evaluation, accuracy)`.
    pub history: Vec<(usize, f64, f64)>,
}

/// One supervised step for the agent.
#[derive(Clone, Debug)]
pub struct AgentSample {
    pub screen: Screen,
    pub utterance: MaskedUtterance,
    pub action: MacroAction,
    pub target: AgentTarget,
    feats: FeatureMatrix,
}

/// Every step of `pool` with an action the agent can express.
pub fn agent_samples(pool: &[Demonstration], suite: &Suite, net: &AgentNet, masking: bool) -> Vec<AgentSample> {
    let mut out = Vec::new();
    for d in pool {
        let u = mask_or_unmasked(&d.config.utterance, &suite.templates, masking);
        for s in &d.steps {
            let Some(a) = s.action.as_ref().filter(|_| s.provenance.is_demonstration()) else {
                continue;
            };
            let Some(target) = AgentTarget::encode(a, &s.screen, &u, &net.vocab) else {
                log::debug!("skipping inexpressible action {a} in {}", d.episode_id);
                continue;
            };
            out.push(AgentSample {
                feats: featurize_screen(&s.screen, &u),
                screen: s.screen.clone(),
                utterance: u.clone(),
                action: a.clone(),
                target,
            });
        }
    }
    out
}

fn agent_batch(samples: &[&AgentSample], rng: Option<&mut ChaCha8Rng>) -> Result<AgentBatch, AgentError> {
    let feats: Vec<FeatureMatrix> = match rng {
        Some(rng) => samples
            .iter()
            .map(|s| featurize_screen(&augment_screen(&s.screen, rng), &s.utterance))
            .collect(),
        None => samples.iter().map(|s| s.feats.clone()).collect(),
    };
    let items: Vec<(&FeatureMatrix, &[f32])> = feats.iter().zip(samples).map(|(f, s)| (f, s.utterance.embed())).collect();
    AgentBatch::new(&items)
}

/// Fraction of samples whose decoded action equals the gold action.
pub fn agent_sample_accuracy(net: &AgentNet, samples: &[AgentSample]) -> Result<f64, AgentError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0;
    for chunk in samples.chunks(256) {
        let refs: Vec<&AgentSample> = chunk.iter().collect();
        let preds = net.predict_batch(&agent_batch(&refs, None)?)?;
        for (p, s) in preds.iter().zip(chunk) {
            if decode_action(p, &s.screen, &s.utterance, &net.vocab).ok().as_ref() == Some(&s.action) {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / samples.len() as f64)
}

/// Mean training loss of `net` over `samples`, without augmentation.
pub fn agent_loss(net: &AgentNet, samples: &[AgentSample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let refs: Vec<&AgentSample> = chunk.iter().collect();
        let b = agent_batch(&refs, None)?;
        let targets: Vec<AgentTarget> = chunk.iter().map(|s| s.target.clone()).collect();
        let mut t = Tape::new(&net.params);
        let (loss, _) = net.arch().loss(&mut t, &b, &targets)?;
        total += t.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Early stopping on a score that should go up.
struct Patience {
    best: f64,
    since: usize,
    limit: usize,
}

impl Patience {
    fn new(limit: usize) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            since: 0,
            limit,
        }
    }

    /// Records a score; true when training should stop.
    fn observe(&mut self, score: f64) -> bool {
        if score > self.best + 1e-9 {
            self.best = score;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.limit
    }
}

/// Trains `net` in place for up to `budget` samples drawn from `samples`.
/// Calling it again continues from the current parameters.
pub fn train_agent_on(
    net: &mut AgentNet,
    samples: &[AgentSample],
    cfg: &TrainConfig,
    budget: usize,
) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&net.params, cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    let mut patience = Patience::new(cfg.patience);
    let mut next_eval = cfg.eval_every;
    let (mut window_loss, mut window_n) = (0.0, 0usize);
    while report.samples_seen < budget {
        let take = cfg.batch.min(budget - report.samples_seen).min(samples.len()).max(1);
        if order.len() < take {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..take).collect();
        let batch: Vec<&AgentSample> = idx.iter().map(|&i| &samples[i]).collect();
        let b = agent_batch(&batch, cfg.augment.then_some(&mut rng))?;
        let targets: Vec<AgentTarget> = batch.iter().map(|s| s.target.clone()).collect();
        let grads = {
            let mut t = Tape::new(&net.params);
            let (loss, _) = net.arch().loss(&mut t, &b, &targets)?;
            let l = t.scalar(loss);
            if report.updates == 0 {
                report.first_loss = l;
            }
            report.final_loss = l;
            window_loss += l;
            window_n += 1;
            t.backward(loss)?
        };
        adam.update(&mut net.params, &grads)?;
        report.updates += 1;
        report.samples_seen += take;
        if report.samples_seen >= next_eval || report.samples_seen >= budget {
            next_eval += cfg.eval_every;
            let acc = agent_sample_accuracy(net, samples)?;
            report.eval_accuracy = acc;
            report.history.push((report.samples_seen, window_loss / window_n.max(1) as f64, acc));
            window_loss = 0.0;
            window_n = 0;
            if patience.observe(acc) && report.samples_seen < budget {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Builds samples from `pool` and trains for `budget` samples.
pub fn train_agent(
    net: &mut AgentNet,
    pool: &[Demonstration],
    suite: &Suite,
    cfg: &TrainConfig,
    budget: usize,
) -> Result<TrainReport, TrainError> {
    let samples = agent_samples(pool, suite, net, cfg.masking);
    train_agent_on(net, &samples, cfg, budget)
}

/// A featurized referee episode with its per-step labels.
#[derive(Clone, Debug)]
pub struct RefereeSample {
    pub episode: RefereeEpisode,
    pub labels: Vec<RefereeLabel>,
}

/// Target label for a recorded step. Running out of steps is the
/// terminator's call, so the network learns PENDING there.
pub fn referee_target(l: RefereeLabel) -> RefereeLabel {
    match l {
        RefereeLabel::Failed => RefereeLabel::Pending,
        other => other,
    }
}

fn referee_sample(d: &Demonstration, u: &MaskedUtterance) -> RefereeSample {
    RefereeSample {
        episode: RefereeEpisode {
            screens: d.steps.iter().map(|s| featurize_screen(&s.screen, u)).collect(),
            history: (0..d.steps.len()).map(|t| d.history(t)).collect(),
            utt: u.embed().to_vec(),
        },
        labels: d.steps.iter().map(|s| referee_target(s.referee_label)).collect(),
    }
}

/// Referee training set: `copies` versions of every demonstration, the first
/// as recorded and the rest augmented.
pub fn referee_samples(pool: &[Demonstration], suite: &Suite, cfg: &TrainConfig) -> Vec<RefereeSample> {
    let mut out = Vec::new();
    for (i, d) in pool.iter().enumerate() {
        let u = mask_or_unmasked(&d.config.utterance, &suite.templates, cfg.masking);
        out.push(referee_sample(d, &u));
        if cfg.augment {
            for c in 1..cfg.referee_copies.max(1) {
                let seed = cfg.seed ^ ((i as u64) << 20) ^ c as u64;
                out.push(referee_sample(&augment(d, seed), &u));
            }
        }
    }
    out
}

/// Inverse-frequency label weights normalized to a mean of one per step.
pub fn label_weights(samples: &[RefereeSample]) -> [f64; N_LABELS] {
    let mut counts = [0usize; N_LABELS];
    for s in samples {
        for l in &s.labels {
            counts[l.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let mut w = [0.0; N_LABELS];
    for (wi, &c) in w.iter_mut().zip(&counts) {
        if c > 0 {
            *wi = total as f64 / (present * c) as f64;
        }
    }
    w
}

/// Per-step label accuracy of `net` on `samples`.
pub fn referee_sample_accuracy(net: &RefereeNet, samples: &[RefereeSample]) -> Result<f64, NnError> {
    let (mut hit, mut n) = (0usize, 0usize);
    for chunk in samples.chunks(128) {
        let eps: Vec<&RefereeEpisode> = chunk.iter().map(|s| &s.episode).collect();
        let verdicts = net.predict_batch(&RefereeBatch::new(&eps)?)?;
        for (vs, s) in verdicts.iter().zip(chunk) {
            for (v, l) in vs.iter().zip(&s.labels) {
                n += 1;
                hit += usize::from(v.label == *l);
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Trains the referee on prepared samples; one sample is one episode.
/// `eval_on` is the set used for early stopping.
pub fn train_referee_on(
    net: &mut RefereeNet,
    samples: &[RefereeSample],
    eval_on: &[RefereeSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let weights = label_weights(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&net.params, cfg.lr);
    let mut report = TrainReport::default();
    let mut patience = Patience::new(cfg.patience);
    let mut next_eval = cfg.eval_every.min(samples.len() * 2).max(1);
    let eval_stride = next_eval;
    let (mut window_loss, mut window_n) = (0.0, 0usize);
    'epochs: for _ in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let items: Vec<&RefereeSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let eps: Vec<&RefereeEpisode> = items.iter().map(|s| &s.episode).collect();
            let b = RefereeBatch::new(&eps)?;
            let labels: Vec<Vec<RefereeLabel>> = items.iter().map(|s| s.labels.clone()).collect();
            let steps: usize = labels.iter().map(Vec::len).sum();
            let inv = 1.0 / steps.max(1) as f64;
            let w: Vec<Vec<f64>> = labels
                .iter()
                .map(|ls| ls.iter().map(|l| weights[l.index()] * inv).collect())
                .collect();
            let grads = {
                let mut t = Tape::new(&net.params);
                let loss = net.arch().loss(&mut t, &b, &labels, &w)?;
                let l = t.scalar(loss);
                if report.updates == 0 {
                    report.first_loss = l;
                }
                report.final_loss = l;
                window_loss += l;
                window_n += 1;
                t.backward(loss)?
            };
            adam.update(&mut net.params, &grads)?;
            report.updates += 1;
            report.samples_seen += chunk.len();
            if report.samples_seen >= next_eval {
                next_eval += eval_stride;
                let acc = referee_sample_accuracy(net, eval_on)?;
                report.eval_accuracy = acc;
                report.history.push((report.samples_seen, window_loss / window_n.max(1) as f64, acc));
                window_loss = 0.0;
                window_n = 0;
                if patience.observe(acc) {
                    report.stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if report.history.last().map(|h| h.0) != Some(report.samples_seen) {
        report.eval_accuracy = referee_sample_accuracy(net, eval_on)?;
        report.history.push((report.samples_seen, window_loss / window_n.max(1) as f64, report.eval_accuracy));
    }
    Ok(report)
}

/// Builds referee samples from `pool` and trains. Early stopping looks at
/// the unaugmented demonstrations.
pub fn train_referee(
    net: &mut RefereeNet,
    pool: &[Demonstration],
    suite: &Suite,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let samples = referee_samples(pool, suite, cfg);
    let plain = TrainConfig {
        augment: false,
        ..cfg.clone()
    };
    let eval_on = referee_samples(pool, suite, &plain);
    train_referee_on(net, &samples, &eval_on, cfg)
}

/// Label counts over a pool, in [`RefereeLabel::ALL`] order.
pub fn label_distribution(pool: &[Demonstration]) -> BTreeMap<RefereeLabel, usize> {
    let mut m = BTreeMap::new();
    for d in pool {
        for s in &d.steps {
            *m.entry(s.referee_label).or_insert(0) += 1;
        }
    }
    m
}

/// Shared handle type used by the experiment drivers.
pub type SuiteRef = Arc<Suite>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ArgumentVocab;
    use crate::checkpoint::params_hash;
    use crate::demo::{record, Oracle, Provenance};
    use crate::sim::{EpisodeConfig, SlotSplit};

    fn demo(suite: &Arc<Suite>, task: &str, seed: u64) -> Demonstration {
        let cfg = EpisodeConfig::sample(suite, task, seed, SlotSplit::Train).unwrap();
        record(suite, cfg, &Oracle, Provenance::Oracle).unwrap()
    }

    fn agent(suite: &Suite, seed: u64) -> AgentNet {
        AgentNet::new(ArgumentVocab::new(&suite.app_names()), seed)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            augment: false,
            eval_every: 1_000_000,
            ..TrainConfig::agent()
        }
    }

    #[test]
    fn one_demonstration_is_memorized() {
        let s = Suite::builtin();
        let pool = [demo(&s, "search_shop", 3)];
        let mut net = agent(&s, 1);
        let samples = agent_samples(&pool, &s, &net, true);
        let cfg = quick();
        train_agent_on(&mut net, &samples, &cfg, 500 * samples.len()).unwrap();
        let loss = agent_loss(&net, &samples).unwrap();
        assert!(loss < 0.05, "loss {loss}");
        assert_eq!(agent_sample_accuracy(&net, &samples).unwrap(), 1.0);
    }

    #[test]
    fn untrained_pointer_is_near_uniform() {
        let s = Suite::builtin();
        let pool: Vec<Demonstration> = (0..6).map(|i| demo(&s, "compose_mail", i)).collect();
        let net = agent(&s, 2);
        let samples = agent_samples(&pool, &s, &net, true);
        let (mut ce, mut uniform, mut n) = (0.0, 0.0, 0.0);
        for smp in &samples {
            let Some(gold) = smp.target.element else { continue };
            let p = net.predict(&smp.screen, &smp.utterance).unwrap();
            ce -= (p.element_weights[gold] as f64).ln();
            uniform += (smp.screen.elements.len() as f64).ln();
            n += 1.0;
        }
        let (ce, uniform) = (ce / n, uniform / n);
        assert!((ce - uniform).abs() < 0.15 * uniform, "ce {ce} vs ln n {uniform}");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let s = Suite::builtin();
        let pool = [demo(&s, "toggle_setting", 0), demo(&s, "search_tube", 1)];
        let cfg = TrainConfig {
            batch: 4,
            ..TrainConfig::agent()
        };
        let run = || {
            let mut net = agent(&s, 9);
            let r = train_agent(&mut net, &pool, &s, &cfg, 64).unwrap();
            (net, r)
        };
        let (mut a, ra) = run();
        let (b, rb) = run();
        assert_eq!(params_hash(&a.params), params_hash(&b.params));
        assert_eq!(ra, rb);
        let before = params_hash(&a.params);
        let more = train_agent(&mut a, &pool, &s, &cfg, 32).unwrap();
        assert_ne!(params_hash(&a.params), before);
        assert!(more.first_loss < ra.first_loss, "{} vs {}", more.first_loss, ra.first_loss);
    }

    #[test]
    fn empty_pool_is_rejected() {
        let s = Suite::builtin();
        let mut net = agent(&s, 0);
        assert!(matches!(train_agent(&mut net, &[], &s, &quick(), 10), Err(TrainError::EmptyPool)));
        let mut r = RefereeNet::new(0);
        assert!(matches!(
            train_referee(&mut r, &[], &s, &TrainConfig::referee()),
            Err(TrainError::EmptyPool)
        ));
    }

    #[test]
    fn pending_dominates_and_weights_rebalance() {
        let s = Suite::builtin();
        let pool: Vec<Demonstration> = s.tasks.iter().map(|t| demo(&s, &t.task_id, 5)).collect();
        let dist = label_distribution(&pool);
        let pending = dist[&RefereeLabel::Pending];
        assert!(dist.iter().all(|(l, &c)| *l == RefereeLabel::Pending || c < pending), "{dist:?}");
        let samples = referee_samples(&pool, &s, &TrainConfig { augment: false, ..TrainConfig::referee() });
        let w = label_weights(&samples);
        // Each present label contributes the same total weight.
        let mass: Vec<f64> = RefereeLabel::ALL
            .iter()
            .filter_map(|l| dist.get(l).map(|&c| c as f64 * w[l.index()]))
            .collect();
        for m in &mass {
            assert!((m - mass[0]).abs() < 1e-9 * mass[0]);
        }
        assert_eq!(w[RefereeLabel::Failed.index()], 0.0);
    }

    #[test]
    fn one_episode_referee_fits_exactly() {
        let s = Suite::builtin();
        let pool = [demo(&s, "compose_mail", 2)];
        let cfg = TrainConfig {
            augment: false,
            max_epochs: 200,
            batch: 1,
            patience: 1_000,
            ..TrainConfig::referee()
        };
        let mut net = RefereeNet::new(4);
        let r = train_referee(&mut net, &pool, &s, &cfg).unwrap();
        assert_eq!(r.eval_accuracy, 1.0, "{:?}", r.history.last());
    }

    #[test]
    fn augmented_referee_copies_keep_labels() {
        let s = Suite::builtin();
        let pool = [demo(&s, "view_cart", 1)];
        let samples = referee_samples(&pool, &s, &TrainConfig::referee());
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(|x| x.labels == samples[0].labels));
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c: TrainConfig = serde_json::from_str(r#"{"mode":"referee","batch":128,"lr":0.01}"#).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.budget, 100_000);
        assert_eq!(TrainConfig::referee().batch, 128);
        assert_eq!(TrainConfig::agent().batch, 256);
        assert_eq!(TrainConfig::agent().lr, 1e-3);
    }
}
