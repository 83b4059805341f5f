use thiserror::Error;

/// Errors raised by tensor arithmetic and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("softmax: row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("{op}: {reason}")]
    InvalidValue { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Errors from model configuration and input validation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("e2 must equal d * e1 ({d} * {e1} = {expected}), got {e2}")]
    EmbedMismatch {
        d: usize,
        e1: usize,
        e2: usize,
        expected: usize,
    },
    #[error("batch of {batch} rows is not divisible by block length {block_len}; re-block the batch")]
    NotBlockAligned { batch: usize, block_len: usize },
    #[error("task id {id} is outside 0..={max}")]
    TaskIdOutOfRange { id: usize, max: usize },
}

impl ConfigError {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

/// Top-level error for model, training and evaluation operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("training diverged at epoch {epoch}: loss is {loss}; parameters restored to the last finite state")]
    Diverged { epoch: usize, loss: f64 },
}

impl Error {
    /// True for errors caused by bad user input or configuration, as opposed
    /// to numeric or I/O failures at run time.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Data(e) => e.is_validation(),
            Error::Checkpoint(e) => e.is_validation(),
            Error::Tensor(TensorError::ShapeMismatch { .. }) => true,
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
