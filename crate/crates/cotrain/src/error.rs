//! Shared error type for the whole crate.

use thiserror::Error;

/// Errors surfaced by tensor ops, training loops, and file handling.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform (matrix sizes, channel counts, mask sizes, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was called outside its contract (non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss was requested over zero valid pixels.
    #[error("loss over empty pixel set: {0}")]
    EmptyLoss(String),

    /// An index fell outside its allowed range.
    #[error("out of range: {0}")]
    Range(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed or inconsistent input data (files, manifests).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
