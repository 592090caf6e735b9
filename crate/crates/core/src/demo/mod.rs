//! Demonstrations: the trace format, recording, replay, augmentation and
//! the error-driven collection loop.

mod augment;
mod rollout;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::{ActionOutcome, MacroAction};
use crate::referee::{ActionHistory, RefereeLabel};
use crate::screen::Screen;
use crate::sim::{EpisodeConfig, SimEnv, SimError, Suite};
use crate::text::{mask_or_unmasked, MaskedUtterance};

pub use augment::{augment, augment_screen, P_AUG, P_UNCHANGED};
pub use rollout::{
    collect_corrections, error_driven_round, rollout, CorrectionSource, FailureCase, Oracle, Policy, Rollout,
    RolloutStep, RoundMetrics,
};

pub const TRACE_SCHEMA: &str = "v1";
pub const TRACE_EXT: &str = "uinav.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported trace schema {0:?}")]
    Schema(String),
    #[error("no oracle action available for task {0}")]
    OracleUnavailable(String),
    #[error("corrections from the console are recorded through the gateway")]
    InteractiveSource,
    #[error("model: {0}")]
    Model(String),
    #[error("replay diverged at step {step}: {reason}")]
    ReplayDiverged { step: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Human,
    Oracle,
    AgentAccepted,
    /// A failed agent rollout kept for the referee; never an action target.
    AgentRollout,
}

impl Provenance {
    /// Whether the recorded actions may be imitated.
    pub fn is_demonstration(self) -> bool {
        self != Provenance::AgentRollout
    }
}

/// One observed screen and what was done on it. The final record of an
/// episode carries no action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub episode_id: String,
    pub screen: Screen,
    pub action: Option<MacroAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ActionOutcome>,
    pub referee_label: RefereeLabel,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TraceHeader {
    schema: String,
    episode_id: String,
    config: EpisodeConfig,
    utterance: MaskedUtterance,
    final_verdict: Option<RefereeLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub episode_id: String,
    pub config: EpisodeConfig,
    /// Masked form of `config.utterance` at recording time.
    pub utterance: MaskedUtterance,
    pub steps: Vec<StepRecord>,
    /// `None` for a partial trace saved before the episode ended.
    pub final_verdict: Option<RefereeLabel>,
}

impl Demonstration {
    pub fn episode_id_for(cfg: &EpisodeConfig) -> String {
        format!("{}-{}", cfg.task_id, cfg.seed)
    }

    /// History the referee sees at step `t`.
    pub fn history(&self, t: usize) -> ActionHistory {
        if t == 0 {
            return ActionHistory::default();
        }
        let prev = &self.steps[t - 1];
        match (&prev.action, &prev.outcome) {
            (Some(a), Some(o)) => ActionHistory::after(a.kind, o),
            (Some(a), None) => ActionHistory {
                prev_kind: Some(a.kind),
                prev_succeeded: false,
            },
            _ => ActionHistory::default(),
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = &MacroAction> {
        self.steps.iter().filter_map(|s| s.action.as_ref())
    }

    pub fn to_jsonl(&self) -> String {
        let header = TraceHeader {
            schema: TRACE_SCHEMA.to_owned(),
            episode_id: self.episode_id.clone(),
            config: self.config.clone(),
            utterance: self.utterance.clone(),
            final_verdict: self.final_verdict,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader(r: impl BufRead) -> Result<Self, DemoError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, first) = lines.next().ok_or(DemoError::Parse {
            line: 1,
            reason: "empty trace".into(),
        })?;
        let header: TraceHeader = serde_json::from_str(&first?).map_err(|e| DemoError::Parse {
            line: 1,
            reason: e.to_string(),
        })?;
        if header.schema != TRACE_SCHEMA {
            return Err(DemoError::Schema(header.schema));
        }
        let mut steps = Vec::new();
        for (i, line) in lines {
            let s: StepRecord = serde_json::from_str(&line?).map_err(|e| DemoError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            steps.push(s);
        }
        Ok(Self {
            episode_id: header.episode_id,
            config: header.config,
            utterance: header.utterance,
            steps,
            final_verdict: header.final_verdict,
        })
    }

    pub fn from_jsonl(s: &str) -> Result<Self, DemoError> {
        Self::from_reader(s.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), DemoError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DemoError> {
        Self::from_reader(BufReader::new(fs::File::open(path)?))
    }
}

/// Every `*.uinav.jsonl` file directly under `dir`, in file-name order.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, DemoError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(TRACE_EXT)))
        .collect();
    files.sort();
    Ok(files)
}

/// Append-only collection of demonstrations.
#[derive(Clone, Debug, Default)]
pub struct DemoPool {
    demos: Vec<Demonstration>,
}

impl DemoPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, d: Demonstration) {
        self.demos.push(d);
    }

    pub fn extend(&mut self, ds: impl IntoIterator<Item = Demonstration>) {
        self.demos.extend(ds);
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn load_dir(dir: &Path) -> Result<Self, DemoError> {
        let demos = trace_files(dir)?.iter().map(|p| Demonstration::load(p)).collect::<Result<_, _>>()?;
        Ok(Self { demos })
    }

    /// Writes demonstrations `from..` as `NNNNN-<episode>.uinav.jsonl`.
    pub fn save_dir(&self, dir: &Path, from: usize) -> Result<(), DemoError> {
        fs::create_dir_all(dir)?;
        for (i, d) in self.demos.iter().enumerate().skip(from) {
            d.save(&dir.join(format!("{i:05}-{}.{TRACE_EXT}", d.episode_id)))?;
        }
        Ok(())
    }
}

/// Runs one episode under `policy` and records every observed screen.
pub fn record(
    suite: &Arc<Suite>,
    cfg: EpisodeConfig,
    policy: &dyn Policy,
    provenance: Provenance,
) -> Result<Demonstration, DemoError> {
    let utterance = mask_or_unmasked(&cfg.utterance, &suite.templates, true);
    let episode_id = Demonstration::episode_id_for(&cfg);
    let mut env = SimEnv::reset(suite.clone(), cfg.clone())?;
    let mut steps = Vec::new();
    loop {
        let screen = env.observation().clone();
        let label = RefereeLabel::from(env.verdict());
        let step = env.steps();
        if env.verdict().is_terminal() {
            steps.push(StepRecord {
                step,
                episode_id: episode_id.clone(),
                screen,
                action: None,
                outcome: None,
                referee_label: label,
                provenance,
            });
            break;
        }
        let a = policy
            .act(&env, &utterance)
            .ok_or_else(|| DemoError::OracleUnavailable(cfg.task_id.clone()))?;
        let r = env.step(&a)?;
        steps.push(StepRecord {
            step,
            episode_id: episode_id.clone(),
            screen,
            action: Some(a),
            outcome: Some(r.outcome),
            referee_label: label,
            provenance,
        });
    }
    Ok(Demonstration {
        episode_id,
        config: cfg,
        utterance,
        final_verdict: steps.last().map(|s| s.referee_label),
        steps,
    })
}

/// Re-executes the recorded actions under the same configuration and checks
/// that every screen, outcome and label comes back identical.
pub fn replay(suite: &Arc<Suite>, d: &Demonstration) -> Result<(), DemoError> {
    let mut env = SimEnv::reset(suite.clone(), d.config.clone())?;
    for (i, s) in d.steps.iter().enumerate() {
        let diverged = |reason: String| DemoError::ReplayDiverged { step: i, reason };
        if env.observation() != &s.screen {
            return Err(diverged(format!(
                "screen {} differs from recorded {}",
                env.observation().screen_id,
                s.screen.screen_id
            )));
        }
        if RefereeLabel::from(env.verdict()) != s.referee_label {
            return Err(diverged(format!("verdict {:?} vs recorded {:?}", env.verdict(), s.referee_label)));
        }
        match &s.action {
            Some(a) => {
                let r = env.step(a).map_err(|e| diverged(e.to_string()))?;
                if s.outcome.as_ref().is_some_and(|o| *o != r.outcome) {
                    return Err(diverged(format!("outcome of {a} differs")));
                }
            }
            None if i + 1 != d.steps.len() => return Err(diverged("action missing before the end".into())),
            None => {}
        }
    }
    if let Some(v) = d.final_verdict {
        if RefereeLabel::from(env.verdict()) != v && d.steps.last().is_some_and(|s| s.action.is_none()) {
            return Err(DemoError::ReplayDiverged {
                step: d.steps.len(),
                reason: format!("final verdict {:?} vs recorded {v:?}", env.verdict()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SlotSplit;

    fn suite() -> Arc<Suite> {
        Suite::builtin()
    }

    #[test]
    fn oracle_recording_replays_and_round_trips() {
        let s = suite();
        let cfg = EpisodeConfig::sample(&s, "search_tube", 3, SlotSplit::Train).unwrap();
        let d = record(&s, cfg, &Oracle, Provenance::Oracle).unwrap();
        assert_eq!(d.final_verdict, Some(RefereeLabel::Successful));
        assert!(d.steps[..d.steps.len() - 1].iter().all(|s| s.referee_label == RefereeLabel::Pending));
        replay(&s, &d).unwrap();
        let back = Demonstration::from_jsonl(&d.to_jsonl()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_jsonl(), d.to_jsonl());
    }

    #[test]
    fn tampered_trace_fails_replay() {
        let s = suite();
        let cfg = EpisodeConfig::clean(&s, "toggle_setting", 1, SlotSplit::Train).unwrap();
        let mut d = record(&s, cfg, &Oracle, Provenance::Oracle).unwrap();
        d.steps[0].screen.elements[0].text.push('!');
        assert!(matches!(replay(&s, &d), Err(DemoError::ReplayDiverged { step: 0, .. })));
    }

    #[test]
    fn infeasible_task_records_a_single_infeasible_step() {
        let s = suite();
        let cfg = EpisodeConfig::clean(&s, "dark_mode_mail", 0, SlotSplit::Train).unwrap();
        let d = record(&s, cfg, &Oracle, Provenance::Oracle).unwrap();
        assert_eq!(d.steps.len(), 1);
        assert_eq!(d.final_verdict, Some(RefereeLabel::Infeasible));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let s = suite();
        let cfg = EpisodeConfig::clean(&s, "view_cart", 0, SlotSplit::Train).unwrap();
        let d = record(&s, cfg, &Oracle, Provenance::Oracle).unwrap();
        let text = d.to_jsonl().replacen("\"schema\":\"v1\"", "\"schema\":\"v9\"", 1);
        assert!(matches!(Demonstration::from_jsonl(&text), Err(DemoError::Schema(v)) if v == "v9"));
    }
}
