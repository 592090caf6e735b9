//! Session service for recording demonstrations against the simulator.
//!
//! Every endpoint lives under `/v1` and speaks JSON bodies; screens use the
//! same serialization as trace files.

mod server;
pub mod session;
pub mod wire;

pub use server::{router, serve, spawn_expiry};
pub use session::{read_failures, write_failures, DataDir, GatewayError, Models, Session, SessionStore};
