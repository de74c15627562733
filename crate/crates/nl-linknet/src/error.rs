//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is invalid (odd channel count, zero-size
    /// output, indivisible spatial extent, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The API was used outside its contract (backward on a non-scalar,
    /// reusing a consumed tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint bytes are not a valid model file (bad magic, unsupported
    /// version, truncation).
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// Checkpoint is well-formed but does not fit the target model.
    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    /// Dataset files are missing, unreadable or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
