//! Minimal differentiable-computation substrate.
//!
//! Forward primitives record themselves on a [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse and produces gradients for every leaf and
//! parameter that requires them.

pub mod archive;
mod float;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use float::{erf, flush_denormals, DType, Scalar};
pub use params::{ParamGrads, ParamId, ParameterStore, TensorValue};
pub use tape::{Gradients, SparseAdjacency, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
