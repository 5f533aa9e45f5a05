use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LwfError>;

#[derive(Debug, Error)]
pub enum LwfError {
    #[error("token {token} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab_size: usize,
    },

    #[error("context has length {got}, expected exactly {expected}")]
    ContextLength { got: usize, expected: usize },

    #[error("example has an empty answer")]
    EmptyAnswer,

    #[error("dimension mismatch: {what} has {got} entries, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid task spec for domain {domain}: {reason}")]
    InvalidTask { domain: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset mixes domains: expected {expected}, found {found}")]
    MixedDomains { expected: String, found: String },

    #[error("{path}: line {line}: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("non-finite {what} at step {step} ({kind})")]
    NonFinite {
        step: usize,
        kind: String,
        what: &'static str,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("missing baseline entry for learning task {0}")]
    MissingBaseline(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
