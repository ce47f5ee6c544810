//! Reverse-mode differentiation over dense tensors, with the layers the
//! forecasting model is assembled from.

mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use params::{GradStore, ParamId, ParameterStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::{gemm, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: bad rank or shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} to {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cosine of a zero-norm vector (row {row})")]
    ZeroNorm { row: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("{heads} heads do not divide model width {dim}")]
    Heads { heads: usize, dim: usize },
}
