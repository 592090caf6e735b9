//! The error-driven loop and the ablation and transfer experiments.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentNet, ArgumentVocab};
use crate::demo::{collect_corrections, error_driven_round, record, CorrectionSource, Demonstration, Oracle, Provenance};
use crate::referee::RefereeNet;
use crate::sim::{EpisodeConfig, SlotSplit, Suite};

use super::eval::{eval_agent, heldout_configs, train_configs, EvalReport, HELDOUT_SEED_BASE};
use super::{train_agent, train_referee, TrainConfig, TrainError, TrainReport};

/// Oracle demonstrations for `tasks` (all feasible tasks when `None`) on
/// seeds `seeds`.
pub fn oracle_pool(
    suite: &Arc<Suite>,
    tasks: Option<&[&str]>,
    seeds: std::ops::Range<u64>,
    split: SlotSplit,
) -> Result<Vec<Demonstration>, TrainError> {
    let mut out = Vec::new();
    for t in &suite.tasks {
        let keep = match tasks {
            Some(ids) => ids.contains(&t.task_id.as_str()),
            None => true,
        };
        if !keep {
            continue;
        }
        for s in seeds.clone() {
            let cfg = EpisodeConfig::sample(suite, &t.task_id, s, split)?;
            out.push(record(suite, cfg, &Oracle, Provenance::Oracle)?);
        }
    }
    Ok(out)
}

fn feasible_task_ids(suite: &Suite) -> Result<Vec<String>, TrainError> {
    let mut ids = Vec::new();
    for t in &suite.tasks {
        let cfg = EpisodeConfig::clean(suite, &t.task_id, 0, SlotSplit::Train)?;
        if crate::sim::TaskInstance::new(suite, &t.task_id, &cfg.utterance)?.feasible {
            ids.push(t.task_id.clone());
        }
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Initial oracle demonstrations per task.
    pub initial_demos: u64,
    pub max_rounds: usize,
    /// Fresh training-split episodes per task probed each round.
    pub probe_per_task: u64,
    /// Held-out episodes per task for the final report.
    pub eval_per_task: u64,
    pub agent: TrainConfig,
    pub referee: TrainConfig,
    pub source: CorrectionSource,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            initial_demos: 4,
            max_rounds: 8,
            probe_per_task: 12,
            eval_per_task: 30,
            agent: TrainConfig::agent(),
            referee: TrainConfig::referee(),
            source: CorrectionSource::Oracle,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRound {
    pub round: usize,
    pub pool_size: usize,
    pub probed: usize,
    pub agent_failures: usize,
    pub referee_failures: usize,
    pub corrections: usize,
    pub probe_task_accuracy: f64,
    pub agent_train: TrainReport,
    pub referee_train: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub rounds: Vec<LoopRound>,
    pub converged: bool,
    pub final_eval: EvalReport,
    pub seconds: f64,
}

/// Trains on an initial oracle pool, then alternates probing rounds,
/// oracle corrections for every failure and incremental retraining. The
/// pool only grows; corrections join the failed rollouts' predecessors.
pub fn run_loop(
    suite: &Arc<Suite>,
    cfg: &LoopConfig,
    pool: &mut Vec<Demonstration>,
) -> Result<(AgentNet, RefereeNet, LoopReport), TrainError> {
    let start = Instant::now();
    if pool.is_empty() {
        pool.extend(oracle_pool(suite, None, 0..cfg.initial_demos, SlotSplit::Train)?);
    }
    let mut agent = AgentNet::new(ArgumentVocab::new(&suite.app_names()), cfg.seed);
    let mut referee = RefereeNet::new(cfg.seed ^ 0x5EED);
    let mut agent_train = train_agent(&mut agent, pool, suite, &cfg.agent, cfg.agent.budget)?;
    let mut referee_train = train_referee(&mut referee, pool, suite, &cfg.referee)?;
    let mut rounds = Vec::new();
    let mut converged = false;
    let mut next_seed = cfg.initial_demos.max(1_000);
    for round in 0..cfg.max_rounds {
        let probe_seeds = next_seed..next_seed + cfg.probe_per_task;
        next_seed += cfg.probe_per_task;
        assert!(next_seed < HELDOUT_SEED_BASE, "probe seeds ran into the held-out range");
        let probes = train_configs(suite, probe_seeds, SlotSplit::Train)?;
        let (metrics, failures) = error_driven_round(&agent, Some(&referee), suite, &probes, cfg.agent.masking)?;
        log::info!(
            "round {round}: {} agent / {} referee failures over {} episodes, task accuracy {:.3}",
            metrics.agent_failures,
            metrics.referee_failures,
            metrics.episodes,
            metrics.task_accuracy
        );
        let mut entry = LoopRound {
            round,
            pool_size: pool.len(),
            probed: metrics.episodes,
            agent_failures: metrics.agent_failures,
            referee_failures: metrics.referee_failures,
            corrections: 0,
            probe_task_accuracy: metrics.task_accuracy,
            agent_train: agent_train.clone(),
            referee_train: referee_train.clone(),
        };
        if metrics.converged() {
            converged = true;
            rounds.push(entry);
            break;
        }
        let corrections = collect_corrections(suite, &failures, cfg.source)?;
        entry.corrections = corrections.len();
        pool.extend(corrections);
        for f in failures.iter().filter(|f| f.agent_failed) {
            // Aborted rollouts (invalid actions) cannot be recorded; the
            // oracle correction above still covers the configuration.
            if let Ok(d) = record(suite, f.config.clone(), &agent, Provenance::AgentRollout) {
                pool.push(d);
            }
        }
        rounds.push(entry);
        let inc = TrainConfig {
            seed: cfg.agent.seed.wrapping_add(round as u64 + 1),
            ..cfg.agent.clone()
        };
        agent_train = train_agent(&mut agent, pool, suite, &inc, cfg.agent.incremental)?;
        if failures.iter().any(|f| f.referee_failed) {
            let rinc = TrainConfig {
                seed: cfg.referee.seed.wrapping_add(round as u64 + 1),
                ..cfg.referee.clone()
            };
            referee_train = train_referee(&mut referee, pool, suite, &rinc)?;
        }
    }
    let eval = heldout_configs(suite, cfg.eval_per_task, SlotSplit::Train)?;
    let final_eval = eval_agent(&agent, Some(&referee), suite, &eval, cfg.agent.masking)?;
    Ok((
        agent,
        referee,
        LoopReport {
            rounds,
            converged,
            final_eval,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Settings shared by the small-budget comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmallBudget {
    pub demos_per_task: u64,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub eval_per_task: u64,
    pub train: TrainConfig,
}

impl Default for SmallBudget {
    fn default() -> Self {
        Self {
            demos_per_task: 2,
            seeds: vec![0, 1, 2],
            budget: 6_000,
            eval_per_task: 20,
            train: TrainConfig {
                batch: 64,
                eval_every: 1_000,
                ..TrainConfig::agent()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub treatment: Vec<f64>,
    pub control: Vec<f64>,
}

impl AblationReport {
    pub fn mean_treatment(&self) -> f64 {
        mean(&self.treatment)
    }

    pub fn mean_control(&self) -> f64 {
        mean(&self.control)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn train_and_eval(
    suite: &Arc<Suite>,
    pool: &[Demonstration],
    cfg: &TrainConfig,
    budget: usize,
    eval: &[EpisodeConfig],
) -> Result<f64, TrainError> {
    let mut agent = AgentNet::new(ArgumentVocab::new(&suite.app_names()), cfg.seed);
    train_agent(&mut agent, pool, suite, cfg, budget)?;
    Ok(eval_agent(&agent, None, suite, eval, cfg.masking)?.task_accuracy)
}

/// Held-out task accuracy with augmentation (treatment) and without.
pub fn ablation_augmentation(suite: &Arc<Suite>, b: &SmallBudget) -> Result<AblationReport, TrainError> {
    let eval = heldout_configs(suite, b.eval_per_task, SlotSplit::Train)?;
    let mut r = AblationReport {
        treatment: Vec::new(),
        control: Vec::new(),
    };
    for &seed in &b.seeds {
        let pool = oracle_pool(suite, None, seed * 1_000..seed * 1_000 + b.demos_per_task, SlotSplit::Train)?;
        for aug in [true, false] {
            let cfg = TrainConfig {
                seed,
                augment: aug,
                ..b.train.clone()
            };
            let acc = train_and_eval(suite, &pool, &cfg, b.budget, &eval)?;
            log::info!("augmentation={aug} seed={seed}: task accuracy {acc:.3}");
            if aug { &mut r.treatment } else { &mut r.control }.push(acc);
        }
    }
    Ok(r)
}

/// Task accuracy on episodes whose slot values never occur in training,
/// with utterance masking (treatment) and without.
pub fn ablation_masking(suite: &Arc<Suite>, b: &SmallBudget) -> Result<AblationReport, TrainError> {
    let eval = heldout_configs(suite, b.eval_per_task, SlotSplit::Heldout)?;
    let mut r = AblationReport {
        treatment: Vec::new(),
        control: Vec::new(),
    };
    for &seed in &b.seeds {
        let pool = oracle_pool(suite, None, seed * 1_000..seed * 1_000 + b.demos_per_task, SlotSplit::Train)?;
        for masking in [true, false] {
            let cfg = TrainConfig {
                seed,
                masking,
                ..b.train.clone()
            };
            let acc = train_and_eval(suite, &pool, &cfg, b.budget, &eval)?;
            log::info!("masking={masking} seed={seed}: held-out-slot task accuracy {acc:.3}");
            if masking { &mut r.treatment } else { &mut r.control }.push(acc);
        }
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub demos_per_task: u64,
    pub seed: u64,
    pub multitask_mean: f64,
    pub singletask_mean: f64,
    pub multitask_per_task: Vec<(String, f64)>,
    pub singletask_per_task: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskReport {
    pub points: Vec<CurvePoint>,
}

impl MultitaskReport {
    /// `(multitask, singletask)` mean accuracy at `demos`, over seeds.
    pub fn means_at(&self, demos: u64) -> Option<(f64, f64)> {
        let pts: Vec<&CurvePoint> = self.points.iter().filter(|p| p.demos_per_task == demos).collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        Some((
            pts.iter().map(|p| p.multitask_mean).sum::<f64>() / n,
            pts.iter().map(|p| p.singletask_mean).sum::<f64>() / n,
        ))
    }

    /// One JSON record per point.
    pub fn to_jsonl(&self) -> String {
        self.points
            .iter()
            .map(|p| serde_json::to_string(p).expect("curve points serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(s: &str) -> Result<Self, serde_json::Error> {
        let points = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { points })
    }
}

/// For each demonstration count and seed, one agent trained on every
/// feasible task against one agent per task, all with the same budget,
/// scored per task on held-out episodes.
pub fn experiment_multitask(
    suite: &Arc<Suite>,
    demo_counts: &[u64],
    b: &SmallBudget,
) -> Result<MultitaskReport, TrainError> {
    let tasks = feasible_task_ids(suite)?;
    let mut points = Vec::new();
    for &n in demo_counts {
        for &seed in &b.seeds {
            let base = seed * 1_000;
            let cfg = TrainConfig { seed, ..b.train.clone() };
            let pool = oracle_pool(suite, None, base..base + n, SlotSplit::Train)?;
            let mut multi = AgentNet::new(ArgumentVocab::new(&suite.app_names()), seed);
            train_agent(&mut multi, &pool, suite, &cfg, b.budget)?;
            let (mut mt, mut st) = (Vec::new(), Vec::new());
            for id in &tasks {
                let eval: Vec<EpisodeConfig> = heldout_configs(suite, b.eval_per_task, SlotSplit::Train)?
                    .into_iter()
                    .filter(|c| &c.task_id == id)
                    .collect();
                let m = eval_agent(&multi, None, suite, &eval, cfg.masking)?.task_accuracy;
                let own: Vec<Demonstration> = pool.iter().filter(|d| &d.config.task_id == id).cloned().collect();
                let s = train_and_eval(suite, &own, &cfg, b.budget, &eval)?;
                log::info!("demos={n} seed={seed} {id}: multi {m:.3} single {s:.3}");
                mt.push((id.clone(), m));
                st.push((id.clone(), s));
            }
            let avg = |v: &[(String, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len().max(1) as f64;
            points.push(CurvePoint {
                demos_per_task: n,
                seed,
                multitask_mean: avg(&mt),
                singletask_mean: avg(&st),
                multitask_per_task: mt,
                singletask_per_task: st,
            });
        }
    }
    Ok(MultitaskReport { points })
}
