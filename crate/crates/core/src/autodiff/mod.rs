//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed order, so a
//! forward pass is bit-deterministic for identical inputs.

pub(crate) mod kernels;
mod tape;
mod tensor;

pub use kernels::dot;
pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty input")]
    Empty,
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("loss does not depend on any value that requires gradients")]
    Detached,
}
