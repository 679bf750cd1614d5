use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("computation graph was already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds maximum length {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown example id `{0}`")]
    UnknownExample(String),

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("gap closure undefined: teacher and student scores are equal ({0})")]
    UndefinedGap(f64),

    #[error("memory budget of {budget} bytes cannot hold a single example ({needed} bytes)")]
    BudgetTooSmall { budget: usize, needed: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
