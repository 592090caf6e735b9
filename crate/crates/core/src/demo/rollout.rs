//! Closed-loop rollouts and the error-driven collection round.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::MacroAction;
use crate::agent::AgentNet;
use crate::referee::{ActionHistory, RefereeLabel, RefereeNet, RefereeState, Terminator};
use crate::sim::{EnvVerdict, EpisodeConfig, SimEnv, Suite};
use crate::text::{mask_or_unmasked, MaskedUtterance};

use super::{record, DemoError, Demonstration, Provenance};

/// Something that picks the next macro action for an episode.
pub trait Policy {
    fn act(&self, env: &SimEnv, u: &MaskedUtterance) -> Option<MacroAction>;
}

/// The simulator's ground-truth planner.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Policy for Oracle {
    fn act(&self, env: &SimEnv, _u: &MaskedUtterance) -> Option<MacroAction> {
        env.oracle_action().cloned()
    }
}

impl Policy for AgentNet {
    fn act(&self, env: &SimEnv, u: &MaskedUtterance) -> Option<MacroAction> {
        AgentNet::act(self, env.observation(), u).ok()
    }
}

impl<F: Fn(&SimEnv, &MaskedUtterance) -> Option<MacroAction>> Policy for F {
    fn act(&self, env: &SimEnv, u: &MaskedUtterance) -> Option<MacroAction> {
        self(env, u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub screen_id: String,
    pub env_verdict: EnvVerdict,
    pub oracle_action: Option<MacroAction>,
    pub agent_action: Option<MacroAction>,
    pub referee: Option<RefereeLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub config: EpisodeConfig,
    pub feasible: bool,
    pub steps: Vec<RolloutStep>,
    pub final_verdict: EnvVerdict,
    /// Why the rollout stopped before a terminal verdict, if it did.
    pub error: Option<String>,
}

impl Rollout {
    /// `(matching, total)` over steps where the oracle had an action.
    pub fn step_matches(&self) -> (usize, usize) {
        let scored = self.steps.iter().filter(|s| s.oracle_action.is_some());
        let (mut hit, mut n) = (0, 0);
        for s in scored {
            n += 1;
            if s.agent_action == s.oracle_action {
                hit += 1;
            }
        }
        (hit, n)
    }

    /// Every step matched the oracle and the episode succeeded.
    pub fn task_correct(&self) -> bool {
        let (hit, n) = self.step_matches();
        hit == n && self.final_verdict == EnvVerdict::Success
    }

    pub fn agent_failed(&self) -> bool {
        self.feasible && self.final_verdict != EnvVerdict::Success
    }

    /// `(agreeing, total)` referee steps against the simulator verdict.
    pub fn referee_matches(&self) -> (usize, usize) {
        let judged = self.steps.iter().filter_map(|s| s.referee.map(|r| (r, s.env_verdict)));
        let (mut hit, mut n) = (0, 0);
        for (r, v) in judged {
            n += 1;
            if r == RefereeLabel::from(v) {
                hit += 1;
            }
        }
        (hit, n)
    }

    pub fn first_referee_miss(&self) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.referee.is_some_and(|r| r != RefereeLabel::from(s.env_verdict)))
    }

    pub fn first_agent_miss(&self) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.oracle_action.is_some() && s.agent_action != s.oracle_action)
    }
}

/// Runs `policy` until the simulator reports a terminal verdict, asking the
/// referee (when given) for a verdict on every observed screen. The
/// referee's stream passes through a [`Terminator`] whose budget is one
/// verdict per allowed action plus the final screen.
pub fn rollout(
    suite: &Arc<Suite>,
    cfg: &EpisodeConfig,
    policy: &dyn Policy,
    referee: Option<&RefereeNet>,
    masking: bool,
) -> Result<Rollout, DemoError> {
    let u = mask_or_unmasked(&cfg.utterance, &suite.templates, masking);
    let mut env = SimEnv::reset(suite.clone(), cfg.clone())?;
    let mut state = RefereeState::default();
    let mut hist = ActionHistory::default();
    let term = Terminator {
        max_steps: cfg.max_steps + 1,
    };
    let mut steps = Vec::new();
    let mut error = None;
    loop {
        let judged = match referee {
            Some(r) => {
                let (v, next) = r
                    .step(env.observation(), &u, hist, &state)
                    .map_err(|e| DemoError::Model(e.to_string()))?;
                state = next;
                Some(term.observe(state.step_index, v.label).unwrap_or(v.label))
            }
            None => None,
        };
        let mut step = RolloutStep {
            screen_id: env.observation().screen_id.clone(),
            env_verdict: env.verdict(),
            oracle_action: None,
            agent_action: None,
            referee: judged,
        };
        if env.verdict().is_terminal() {
            steps.push(step);
            break;
        }
        step.oracle_action = env.oracle_action().cloned();
        step.agent_action = policy.act(&env, &u);
        let action = step.agent_action.clone();
        steps.push(step);
        let Some(a) = action else {
            error = Some("policy produced no action".to_owned());
            break;
        };
        match env.step(&a) {
            Ok(r) => hist = ActionHistory::after(a.kind, &r.outcome),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    Ok(Rollout {
        config: cfg.clone(),
        feasible: env.task().feasible,
        steps,
        final_verdict: env.verdict(),
        error,
    })
}

/// A reproducible failing episode queued for correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub config: EpisodeConfig,
    pub failing_step: usize,
    pub agent_failed: bool,
    pub referee_failed: bool,
    pub agent_action: Option<MacroAction>,
    pub referee_stream: Vec<RefereeLabel>,
    pub env_stream: Vec<EnvVerdict>,
}

impl FailureCase {
    fn from_rollout(r: &Rollout) -> Option<Self> {
        let agent_failed = r.agent_failed();
        let referee_miss = r.first_referee_miss();
        if !agent_failed && referee_miss.is_none() {
            return None;
        }
        let agent_step = agent_failed.then(|| r.first_agent_miss().unwrap_or(r.steps.len() - 1));
        let failing_step = match (agent_step, referee_miss) {
            (Some(a), Some(b)) => a.min(b),
            (a, b) => a.or(b).unwrap_or(0),
        };
        Some(Self {
            config: r.config.clone(),
            failing_step,
            agent_failed,
            referee_failed: referee_miss.is_some(),
            agent_action: r.steps.get(failing_step).and_then(|s| s.agent_action.clone()),
            referee_stream: r.steps.iter().filter_map(|s| s.referee).collect(),
            env_stream: r.steps.iter().map(|s| s.env_verdict).collect(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub episodes: usize,
    pub feasible_episodes: usize,
    pub agent_failures: usize,
    pub referee_failures: usize,
    pub task_accuracy: f64,
    pub step_accuracy: f64,
    pub referee_step_accuracy: Option<f64>,
}

impl RoundMetrics {
    pub fn converged(&self) -> bool {
        self.agent_failures == 0 && self.referee_failures == 0
    }

    pub fn from_rollouts(rs: &[Rollout]) -> Self {
        let feasible: Vec<&Rollout> = rs.iter().filter(|r| r.feasible).collect();
        let (mut hit, mut n) = (0, 0);
        for r in &feasible {
            let (h, t) = r.step_matches();
            hit += h;
            n += t;
        }
        let (mut rh, mut rn) = (0, 0);
        for r in rs {
            let (h, t) = r.referee_matches();
            rh += h;
            rn += t;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            episodes: rs.len(),
            feasible_episodes: feasible.len(),
            agent_failures: rs.iter().filter(|r| r.agent_failed()).count(),
            referee_failures: rs.iter().filter(|r| r.first_referee_miss().is_some()).count(),
            task_accuracy: ratio(feasible.iter().filter(|r| r.task_correct()).count(), feasible.len()),
            step_accuracy: ratio(hit, n),
            referee_step_accuracy: (rn > 0).then(|| ratio(rh, rn)),
        }
    }
}

/// Rolls the agent out on every configuration and returns the metrics and
/// the episodes where the agent or the referee went wrong.
pub fn error_driven_round(
    agent: &dyn Policy,
    referee: Option<&RefereeNet>,
    suite: &Arc<Suite>,
    configs: &[EpisodeConfig],
    masking: bool,
) -> Result<(RoundMetrics, Vec<FailureCase>), DemoError> {
    let rollouts = configs
        .iter()
        .map(|c| rollout(suite, c, agent, referee, masking))
        .collect::<Result<Vec<_>, _>>()?;
    let failures = rollouts.iter().filter_map(FailureCase::from_rollout).collect();
    Ok((RoundMetrics::from_rollouts(&rollouts), failures))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSource {
    Oracle,
    Console,
}

/// Re-runs each failing configuration under the oracle. Console corrections
/// arrive through the gateway instead.
pub fn collect_corrections(
    suite: &Arc<Suite>,
    failures: &[FailureCase],
    source: CorrectionSource,
) -> Result<Vec<Demonstration>, DemoError> {
    if failures.is_empty() {
        return Ok(Vec::new());
    }
    if source == CorrectionSource::Console {
        return Err(DemoError::InteractiveSource);
    }
    failures
        .iter()
        .map(|f| record(suite, f.config.clone(), &Oracle, Provenance::Oracle))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SlotSplit;

    fn configs(suite: &Suite) -> Vec<EpisodeConfig> {
        suite
            .tasks
            .iter()
            .flat_map(|t| (0..3).map(|s| EpisodeConfig::sample(suite, &t.task_id, s, SlotSplit::Train).unwrap()))
            .collect()
    }

    #[test]
    fn oracle_as_agent_has_no_agent_failures() {
        let s = Suite::builtin();
        let (m, fails) = error_driven_round(&Oracle, None, &s, &configs(&s), true).unwrap();
        assert_eq!(m.agent_failures, 0);
        assert!(fails.is_empty());
        assert_eq!(m.task_accuracy, 1.0);
        assert_eq!(m.step_accuracy, 1.0);
    }

    #[test]
    fn waiting_agent_solves_nothing() {
        let s = Suite::builtin();
        let wait = |_: &SimEnv, _: &MaskedUtterance| Some(MacroAction::wait());
        let (m, fails) = error_driven_round(&wait, None, &s, &configs(&s), true).unwrap();
        assert_eq!(m.task_accuracy, 0.0);
        assert_eq!(fails.len(), m.feasible_episodes);
        assert!(fails.iter().all(|f| f.agent_failed && f.failing_step == 0));
    }

    #[test]
    fn corrections_follow_failures() {
        let s = Suite::builtin();
        assert!(collect_corrections(&s, &[], CorrectionSource::Console).unwrap().is_empty());
        let wait = |_: &SimEnv, _: &MaskedUtterance| Some(MacroAction::wait());
        let cfgs = configs(&s);
        let (_, fails) = error_driven_round(&wait, None, &s, &cfgs[..4], true).unwrap();
        let fixes = collect_corrections(&s, &fails, CorrectionSource::Oracle).unwrap();
        assert_eq!(fixes.len(), fails.len());
        assert!(fixes.iter().all(|d| d.final_verdict == Some(RefereeLabel::Successful)));
        assert!(matches!(
            collect_corrections(&s, &fails, CorrectionSource::Console),
            Err(DemoError::InteractiveSource)
        ));
    }
}
