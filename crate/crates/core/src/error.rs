//! Crate-wide error type.
//!
//! I/O failures are kept distinct from validation failures so callers (in
//! particular the CLI) can map them to different exit codes.

use thiserror::Error;

/// Errors produced by corpus handling, fitting, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying file or stream failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON in an artifact being read.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed TOML in a config being read.
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),

    /// A value violated a documented precondition (range, sign, shape).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Structural mismatch between two objects that must agree (table
    /// shapes, feature dimensions, vector lengths).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A corpus or artifact failed semantic validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A requested configuration cannot be satisfied by any output
    /// (e.g. an unreachable high-risk fraction).
    #[error("infeasible spec: {0}")]
    Infeasible(String),

    /// Numerical failure at run time (divergence, non-finite loss).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
