//! Closed-loop evaluation of an agent and a referee on simulator episodes.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::demo::{rollout, DemoError, Policy, Rollout};
use crate::referee::{RefereeLabel, RefereeNet, N_LABELS};
use crate::sim::{EpisodeConfig, SimError, SlotSplit, Suite};

/// Seeds at or above this value are never used to collect training data.
pub const HELDOUT_SEED_BASE: u64 = 100_000;

/// Randomized configurations for every task in `suite`, seeds `seeds`.
pub fn train_configs(suite: &Suite, seeds: std::ops::Range<u64>, split: SlotSplit) -> Result<Vec<EpisodeConfig>, SimError> {
    let mut out = Vec::new();
    for t in &suite.tasks {
        for s in seeds.clone() {
            out.push(EpisodeConfig::sample(suite, &t.task_id, s, split)?);
        }
    }
    Ok(out)
}

/// `per_task` held-out-seed configurations for every task.
pub fn heldout_configs(suite: &Suite, per_task: u64, split: SlotSplit) -> Result<Vec<EpisodeConfig>, SimError> {
    train_configs(suite, HELDOUT_SEED_BASE..HELDOUT_SEED_BASE + per_task, split)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub episodes: usize,
    pub task_correct: usize,
    pub steps: usize,
    pub steps_matching: usize,
}

impl TaskStats {
    pub fn task_accuracy(&self) -> f64 {
        ratio(self.task_correct, self.episodes)
    }

    pub fn step_accuracy(&self) -> f64 {
        ratio(self.steps_matching, self.steps)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-step referee quality against the simulator's verdicts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefereeReport {
    pub steps: usize,
    pub step_accuracy: f64,
    /// Confusion counts, `confusion[gold][predicted]`.
    pub confusion: [[usize; N_LABELS]; N_LABELS],
    /// Recall per gold label; `None` when the label never occurred.
    pub per_label_accuracy: BTreeMap<RefereeLabel, Option<f64>>,
    /// Mean F1 over labels that occur as gold or prediction.
    pub macro_f1: f64,
}

impl RefereeReport {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (RefereeLabel, RefereeLabel)>) -> Self {
        let mut c = [[0usize; N_LABELS]; N_LABELS];
        for (gold, pred) in pairs {
            c[gold.index()][pred.index()] += 1;
        }
        let steps: usize = c.iter().flatten().sum();
        let correct: usize = (0..N_LABELS).map(|i| c[i][i]).sum();
        let mut per_label = BTreeMap::new();
        let mut f1s = Vec::new();
        for l in RefereeLabel::ALL {
            let i = l.index();
            let gold: usize = c[i].iter().sum();
            let pred: usize = c.iter().map(|row| row[i]).sum();
            per_label.insert(l, (gold > 0).then(|| c[i][i] as f64 / gold as f64));
            if gold + pred > 0 {
                f1s.push(2.0 * c[i][i] as f64 / (gold + pred) as f64);
            }
        }
        Self {
            steps,
            step_accuracy: ratio(correct, steps),
            confusion: c,
            per_label_accuracy: per_label,
            macro_f1: if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub feasible_episodes: usize,
    /// Over feasible episodes: all steps match the oracle and the task succeeds.
    pub task_accuracy: f64,
    /// Over steps of feasible episodes where the oracle had an action.
    pub step_accuracy: f64,
    pub per_task: BTreeMap<String, TaskStats>,
    pub referee: Option<RefereeReport>,
}

impl EvalReport {
    pub fn from_rollouts(rs: &[Rollout]) -> Self {
        let mut per_task: BTreeMap<String, TaskStats> = BTreeMap::new();
        let (mut correct, mut feasible, mut hit, mut n) = (0, 0, 0, 0);
        for r in rs {
            let e = per_task.entry(r.config.task_id.clone()).or_default();
            if !r.feasible {
                continue;
            }
            let (h, t) = r.step_matches();
            let ok = r.task_correct();
            e.episodes += 1;
            e.task_correct += usize::from(ok);
            e.steps += t;
            e.steps_matching += h;
            feasible += 1;
            correct += usize::from(ok);
            hit += h;
            n += t;
        }
        let pairs: Vec<(RefereeLabel, RefereeLabel)> = rs
            .iter()
            .flat_map(|r| r.steps.iter())
            .filter_map(|s| s.referee.map(|p| (RefereeLabel::from(s.env_verdict), p)))
            .collect();
        Self {
            episodes: rs.len(),
            feasible_episodes: feasible,
            task_accuracy: ratio(correct, feasible),
            step_accuracy: ratio(hit, n),
            per_task,
            referee: (!pairs.is_empty()).then(|| RefereeReport::from_pairs(pairs)),
        }
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>8} {:>9} {:>9}\n",
            "task", "episodes", "task_acc", "step_acc"
        );
        for (id, t) in &self.per_task {
            s += &format!(
                "{:<18} {:>8} {:>9.3} {:>9.3}\n",
                id,
                t.episodes,
                t.task_accuracy(),
                t.step_accuracy()
            );
        }
        s += &format!(
            "{:<18} {:>8} {:>9.3} {:>9.3}\n",
            "ALL", self.feasible_episodes, self.task_accuracy, self.step_accuracy
        );
        if let Some(r) = &self.referee {
            s += &format!("referee step accuracy {:.4}, macro F1 {:.4}\n", r.step_accuracy, r.macro_f1);
        }
        s
    }
}

/// Rolls `agent` out on every configuration and scores agent and referee.
pub fn eval_agent(
    agent: &dyn Policy,
    referee: Option<&RefereeNet>,
    suite: &Arc<Suite>,
    configs: &[EpisodeConfig],
    masking: bool,
) -> Result<EvalReport, DemoError> {
    let rs = configs
        .iter()
        .map(|c| rollout(suite, c, agent, referee, masking))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_rollouts(&rs))
}

/// Referee quality on oracle-driven episodes, the setting the referee sees
/// once the agent is reliable.
pub fn eval_referee(
    referee: &RefereeNet,
    suite: &Arc<Suite>,
    configs: &[EpisodeConfig],
    masking: bool,
) -> Result<RefereeReport, DemoError> {
    let report = eval_agent(&crate::demo::Oracle, Some(referee), suite, configs, masking)?;
    Ok(report.referee.unwrap_or_default())
}
