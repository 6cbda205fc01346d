//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite value rejected at tensor construction.
    #[error("non-finite value in tensor data at index {0}")]
    NonFinite(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Image file could not be decoded or encoded.
    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    /// Invariant violation inside the library itself.
    #[error("internal error: {0}")]
    Internal(String),
}

/// Checkpoint load failures, kept distinct so callers can report
/// corrupt files precisely instead of crashing.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("checkpoint: bad magic bytes (not an XFUS file)")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    Version(u32),

    #[error("checkpoint: file truncated")]
    Truncated,

    #[error("checkpoint: corrupt field: {0}")]
    Corrupt(String),

    #[error("checkpoint: architecture mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
