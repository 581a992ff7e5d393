//! Minimal reverse-mode automatic differentiation.
//!
//! The op set covers exactly what the hybrid classifier needs: elementwise
//! arithmetic, matrix products, concatenation, the three activations, a
//! valid-padding 1-d convolution, global max pooling, embedding lookup, a
//! sparse feature projection, and binary cross-entropy. No broadcasting, no
//! higher-order derivatives, no graph rewriting.

mod tape;
mod tensor;

pub use tape::{gru_step, Gradients, GruStepParams, NodeId, Tape};
pub use tensor::{dims_str, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumGradError {
    #[error("{op}: shape mismatch: got {got}, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        got: String,
        expected: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss node")]
    NotScalarLoss,
}
