//! Small reverse-mode differentiation engine with the layers the agent and
//! referee need.

mod adam;
mod attention;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use attention::attention;
pub use layers::{Encoder, EncoderBlock, GruCell, LayerNorm, Linear, Mlp};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{NodeId, Segments, Tape};
pub use tensor::{gemm, matmul, Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called on a node outside the recorded graph")]
    GraphNotEvaluated,
}
