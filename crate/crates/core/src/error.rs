//! Error types shared across the crate.

use crate::training::TrainReport;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Two embeddings coincide under an active hinge, so the triplet
    /// gradient direction is undefined.
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    /// Training produced a non-finite loss. Carries the partial report
    /// for the epochs that completed.
    #[error("numeric failure: {message}")]
    NumericFailure {
        message: String,
        report: Box<TrainReport>,
    },

    /// A file did not conform to its declared schema.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
