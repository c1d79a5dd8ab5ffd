//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an eager tape: every operation computes its value when it
//! is recorded. [`Graph::gradients`] walks the tape backwards and records the
//! adjoint computation as ordinary graph nodes, so a gradient can itself be
//! differentiated again (needed by the critic's gradient penalty).

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use graph::{Gradient, Graph, Span, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested for non-scalar output node {node} with shape {rows}x{cols}")]
    NonScalarOutput { node: usize, rows: usize, cols: usize },
    #[error("unknown input or parameter name `{0}`")]
    UnknownName(String),
    #[error("tensor layout error: {0}")]
    Layout(String),
    #[error("parameter/gradient mismatch: {0}")]
    ParamMismatch(String),
}
