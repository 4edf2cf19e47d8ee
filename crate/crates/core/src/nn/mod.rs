//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes. Values are computed
//! at construction; `set_input` + `forward` re-evaluate the same graph on
//! new data, and `backward` accumulates gradients for every node,
//! including plain inputs — the hypernetwork's output is *data* for the
//! main network, so gradients must flow through input edges as well as
//! weights. All math is f64.

mod adam;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, NodeId, Op};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("backward on stale graph: call forward() after set_input")]
    BackwardBeforeForward,
    #[error("backward seed must be scalar or match the output shape")]
    BadSeed,
}

/// Scaled exponential linear unit constants.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;
