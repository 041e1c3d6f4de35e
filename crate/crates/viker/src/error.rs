//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("position {position} out of range 1..={max}")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("prefix length {got} does not match position {position} (expected {expected})")]
    PrefixLength { position: usize, expected: usize, got: usize },

    #[error("token id {token} out of vocabulary (size {vocab_size})")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss encountered: {0}")]
    NonFiniteLoss(String),

    #[error("distribution is not a simplex: {0}")]
    NotASimplex(String),

    #[error("missing reference distributions for triple {0}")]
    MissingReference(u32),

    #[error("reference pool '{0}' not present in dataset")]
    MissingReferencePool(String),

    #[error("unknown triple id {0}")]
    UnknownTriple(u32),

    #[error("parse error in {file} line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { file: file.into(), line, msg: msg.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
