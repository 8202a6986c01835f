//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod adam;
mod graph;
mod op;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{record, Eager, Graph, Tape, Var};
pub use op::Op;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
