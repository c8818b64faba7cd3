//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A corpus line could not be parsed into a record.
    #[error("corpus line {line}: {msg}")]
    Record { line: usize, msg: String },

    /// The corpus as a whole is unusable (e.g. zero valid records).
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Split file problems: overlap, unknown names, bad format.
    #[error("split error: {0}")]
    Split(String),

    /// Graph construction failed (too few usable residues, degenerate atoms).
    #[error("graph error: {0}")]
    Graph(String),

    /// Local frame could not be built from the given atoms.
    #[error("frame error: {0}")]
    Frame(String),

    /// Tensor/layer shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint serialization problems: bad magic, checksum, shape table.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Refusal to transfer weights across incompatible configurations.
    #[error("transfer error: {0}")]
    Transfer(String),

    /// Configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite loss or other numeric failure during training.
    #[error("training error: {0}")]
    Training(String),

    /// Evaluation over an empty or unusable corpus.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
