use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss in term {term} at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("failed to load weights from {path}: {reason}")]
    Weights { path: PathBuf, reason: String },

    #[error("invalid network definition: {0}")]
    Network(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: String, expected: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },

    #[error("ground truth was built with detector {expected}, not {actual}")]
    DetectorMismatch { expected: String, actual: String },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
