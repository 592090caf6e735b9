//! Simulated device, mock-app suite and ground-truth oracle.

mod device;
mod env;
pub mod oracle;
pub mod spec;
mod suite;

pub use device::{is_text_type, Device, DeviceState, Geometry, Orientation, Placed, Source, World, GRID};
pub use env::{catalog, CatalogEntry, EnvVerdict, EpisodeConfig, SimEnv, SlotSplit, StepResult, TaskInstance};
pub use oracle::{goal_satisfied, OraclePolicy};
pub use suite::{Suite, LAUNCHER};

use crate::action::ActionError;
use crate::text::TextError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("the episode is over")]
    EpisodeOver,
    #[error("stale action: {0}")]
    StaleAction(String),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("utterance {utterance:?} does not fit task {task}")]
    BadUtterance { task: String, utterance: String },
    #[error("invalid suite ({origin}): {reason}")]
    Spec { origin: String, reason: String },
    #[error(transparent)]
    Template(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
