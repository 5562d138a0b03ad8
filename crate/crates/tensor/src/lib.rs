//! Dense f64 tensor computation with a reverse-mode gradient tape.
//!
//! Everything here is CPU-only and 64-bit: models at this scale are small
//! enough that doubles keep finite-difference verification clean. Tensors are
//! rank 1 or rank 2, row-major. A [`Tape`] records forward operations and
//! replays them in reverse to accumulate analytic gradients, which are then
//! applied to a [`ParamStore`] holding parameter values and Adam state.

mod checkpoint;
mod kernels;
mod store;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use store::{xavier_init, AdamParams, Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

/// Errors raised by tensor construction, forward ops, and backward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: invalid shape {shape} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: String,
        reason: String,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward: loss must be a scalar, got shape {shape}")]
    LossNotScalar { shape: String },
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
