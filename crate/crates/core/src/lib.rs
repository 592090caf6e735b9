//! Demonstration-trained UI automation agents.
//!
//! The crate bundles everything needed to train and evaluate a small
//! transformer agent and a recurrent referee against a simulated device:
//! screen featurization, macro actions, the device simulator with its
//! synthetic app suite, a tape-based differentiation layer, the two networks,
//! the demonstration pipeline and the training/evaluation harness.

pub mod action;
pub mod agent;
pub mod checkpoint;
pub mod demo;
pub mod nn;
pub mod referee;
pub mod screen;
pub mod sim;
pub mod text;
pub mod train;

/// Maximum number of elements kept per screen.
pub const N_MAX: usize = 64;
/// Width of the hashed text embedding.
pub const D_TEXT: usize = 64;
/// Maximum number of utterance entities.
pub const K_ENT: usize = 4;
/// Width of one element feature row.
pub const D_ELEM: usize = 9 + D_TEXT + 4 + (K_ENT + 1) + 5;
