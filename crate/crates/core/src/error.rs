use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask generation failed: {0}")]
    Generation(String),

    #[error("training failed at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("intent mask: {0}")]
    Wire(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while reading a checkpoint container. Each variant is a separate
/// diagnostic so callers can tell a foreign file from a damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,

    #[error("version mismatch: file has format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: header declares {expected} payload bytes, file holds {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("shape/offset inconsistency: {0}")]
    Inconsistent(String),

    #[error("malformed header: {0}")]
    Header(String),
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
