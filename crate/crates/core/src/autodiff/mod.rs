//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Define-by-run: building an op evaluates it immediately and records it on
//! the graph; `backward` replays the record in reverse. Graphs are rebuilt
//! every iteration, which keeps changing control flow (skipped frames,
//! variable proposal counts) trivially correct.

mod graph;
mod tensor;

pub use graph::{GradMap, Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not match data length {len}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a matrix, got shape {shape:?}")]
    NotAMatrix { shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for {numel} elements")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        numel: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this graph; rebuild the graph before differentiating again")]
    BackwardReuse,
    #[error("parameter {0:?} registered twice on one graph")]
    DuplicateParam(String),
    #[error("{op}: invalid argument: {why}")]
    InvalidArgument { op: &'static str, why: String },
}
