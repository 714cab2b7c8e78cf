//! Dense f32 tensors, a recording compute tape with reverse-mode
//! differentiation, and a seeded deterministic RNG.

mod rng;
mod tape;
mod tensor;

pub use rng::SeededRng;
pub use tape::{backward, ComputeTape, Node, NodeId, Op};
pub use tensor::{layer_norm, matmul, stable_softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor with dims {dims:?} needs {expected} values, got {got}")]
    BadConstruction {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss node, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("node {node}: {what}")]
    BadNode { node: NodeId, what: String },
}
