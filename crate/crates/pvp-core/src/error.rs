//! Error types shared across the workbench.

use thiserror::Error;

/// Unified error type for corpus, model, tracing, steering and report code.
#[derive(Debug, Error)]
pub enum PvpError {
    /// Invalid configuration (bad field values, impossible requests).
    #[error("configuration error: {0}")]
    Config(String),

    /// A generation step could not produce a valid artifact.
    #[error("generation error: {0}")]
    Generation(String),

    /// Bad argument to an operation (empty input, out-of-range index, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Token not present in the vocabulary.
    #[error("vocabulary error: unknown token `{0}`")]
    Vocab(String),

    /// Tensor/sequence dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Steering intervention outside the valid layer range.
    #[error("intervention error: {0}")]
    Intervention(String),

    /// Non-finite or diverging numerics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Loaded artifact fails its digest or consistency check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Stored record could not be decoded.
    #[error("load error at record {index}: {message}")]
    Load { index: usize, message: String },

    /// An evaluation had no inputs to evaluate.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Degenerate input to a numeric routine (e.g. rank-0 PCA input).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Fitted artifact does not match the model it is applied to.
    #[error("compatibility error: {0}")]
    Compat(String),

    /// Underlying I/O failure, with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A required upstream artifact is missing or stale.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Upstream artifact digest no longer matches what this stage was built from.
    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    /// Another process holds the output-root lock.
    #[error("output root is locked: {0}")]
    Locked(String),
}

impl PvpError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        PvpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PvpError>;
