//! Request and response bodies of the `/v1` protocol.

use serde::{Deserialize, Serialize};
use uinav_core::action::MacroAction;
use uinav_core::demo::{FailureCase, StepRecord};
use uinav_core::referee::{RefereeLabel, RefereeVerdict};
use uinav_core::screen::Screen;
use uinav_core::sim::{EnvVerdict, SlotSplit};

pub const API_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    pub task_id: String,
    pub seed: u64,
    /// Overrides the sampled utterance; must fit the task's template.
    #[serde(default)]
    pub utterance: Option<String>,
    /// Randomized start (geometry, random clicks) instead of a clean one.
    #[serde(default = "yes")]
    pub randomize: bool,
    #[serde(default = "train_split")]
    pub split: SlotSplit,
}

fn yes() -> bool {
    true
}

fn train_split() -> SlotSplit {
    SlotSplit::Train
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub task_id: String,
    pub utterance: String,
    pub masked_utterance: String,
    pub entities: Vec<String>,
    pub step: u32,
    pub screen: Screen,
    pub verdict: EnvVerdict,
    pub over: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionView {
    pub screen_id: String,
    /// `None` when no agent is attached or it could not decide.
    pub action: Option<MacroAction>,
    pub element_weights: Vec<f32>,
    pub kind_probabilities: Vec<f32>,
    pub referee: Option<RefereeVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    #[serde(default)]
    pub action: Option<MacroAction>,
    #[serde(default)]
    pub accept_suggestion: bool,
    /// Screen the client built the action on; a mismatch is stale.
    #[serde(default)]
    pub screen_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub record: StepRecord,
    pub session: SessionView,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinishRequest {
    #[serde(default)]
    pub label: Option<RefereeLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinishResponse {
    pub episode_id: String,
    pub path: String,
    pub steps: usize,
    pub final_verdict: RefereeLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailuresView {
    pub failures: Vec<FailureCase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub version: String,
    pub sessions: usize,
    pub agent: bool,
    pub referee: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::de::DeserializeOwned;
    use std::fmt::Debug;
    use uinav_core::demo::{record, Oracle, Provenance};
    use uinav_core::sim::{EpisodeConfig, Suite};

    fn round_trip<T: Serialize + DeserializeOwned + PartialEq + Debug>(v: &T) {
        let s = serde_json::to_string(v).unwrap();
        assert_eq!(&serde_json::from_str::<T>(&s).unwrap(), v, "{s}");
    }

    #[test]
    fn payloads_survive_the_wire() {
        let suite = Suite::builtin();
        let cfg = EpisodeConfig::sample(&suite, "compose_mail", 4, SlotSplit::Train).unwrap();
        let d = record(&suite, cfg, &Oracle, Provenance::Human).unwrap();
        let view = SessionView {
            session_id: "s".into(),
            task_id: d.config.task_id.clone(),
            utterance: d.config.utterance.clone(),
            masked_utterance: d.utterance.masked_text.clone(),
            entities: d.utterance.entities.clone(),
            step: 1,
            screen: d.steps[0].screen.clone(),
            verdict: EnvVerdict::Pending,
            over: false,
        };
        round_trip(&StartRequest {
            task_id: "t".into(),
            seed: u64::MAX,
            utterance: Some("x".into()),
            randomize: false,
            split: SlotSplit::Heldout,
        });
        round_trip(&view);
        round_trip(&SuggestionView {
            screen_id: "a".into(),
            action: d.steps[0].action.clone(),
            element_weights: vec![0.1, 0.3333333, 1e-30],
            kind_probabilities: vec![0.5; 7],
            referee: Some(RefereeVerdict {
                label: RefereeLabel::Pending,
                probabilities: [0.7, 0.1, 0.1, 0.1],
            }),
        });
        round_trip(&SubmitRequest {
            action: d.steps[0].action.clone(),
            accept_suggestion: true,
            screen_id: None,
        });
        round_trip(&SubmitResponse {
            record: d.steps[0].clone(),
            session: view,
        });
        round_trip(&FinishRequest {
            label: Some(RefereeLabel::Infeasible),
        });
        round_trip(&FinishResponse {
            episode_id: d.episode_id.clone(),
            path: "/tmp/x".into(),
            steps: 3,
            final_verdict: RefereeLabel::Successful,
        });
        round_trip(&FailuresView { failures: Vec::new() });
        round_trip(&ErrorBody {
            error: "stale_action".into(),
            message: "m".into(),
        });
    }

    #[test]
    fn start_request_defaults() {
        let r: StartRequest = serde_json::from_str(r#"{"task_id":"view_cart","seed":3}"#).unwrap();
        assert!(r.randomize);
        assert_eq!(r.split, SlotSplit::Train);
        assert_eq!(r.utterance, None);
    }
}
