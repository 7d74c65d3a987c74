use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    /// A precondition of an operation was violated by its arguments.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The object is in the wrong state for the requested operation
    /// (e.g. fusing an already fused model, folding a train-mode BN).
    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("non-finite value at step {step}: {what}")]
    NumericFailure {
        step: usize,
        what: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
