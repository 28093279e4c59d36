//! Dense numeric kernel with reverse-mode differentiation.
//!
//! Everything the model needs is expressed on row-major 2-D arrays of `f64`;
//! vectors are `1 × n` rows and scalars are `1 × 1`. The [`Graph`] records a
//! tape of operations and replays it backwards to produce parameter
//! gradients, which are accumulated into a [`ParamStore`] and consumed by
//! [`ParamStore::adam_step`].

mod check;
mod graph;
mod ops;
mod store;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{cross_entropy, matmul, sigmoid, softmax, softmax_rows, PROB_FLOOR};
pub use store::{AdamConfig, ParamId, ParamStore, StoredArray, StoredParams};

use thiserror::Error;

/// Dense row-major array. Vectors are single rows, scalars are `1 × 1`.
pub type NumArray = ndarray::Array2<f64>;

/// Boolean keep-mask with the same shape as the array it filters.
pub type Mask = ndarray::Array2<bool>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("softmax: row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: probabilities sum to {sum}, expected 1")]
    NotADistribution { op: &'static str, sum: f64 },
    #[error("backward: loss must be a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dims(a: &NumArray) -> (usize, usize) {
    a.dim()
}

pub(crate) fn ensure_finite(op: &'static str, a: &NumArray) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
