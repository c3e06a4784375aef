//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto process exit
/// codes: property failures → 1, configuration errors → 2, training
/// divergence → 3.
#[derive(Debug, Error)]
pub enum GdlError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("cannot condition on zero-probability token {token}")]
    ZeroProbability { token: usize },

    #[error("extraction failed at position {position}: {source}")]
    ExtractionAt {
        position: usize,
        #[source]
        source: Box<GdlError>,
    },

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("no valid path exists for the given maze")]
    NoValidPath,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("statistical property failed: {0}")]
    PropertyFailure(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
