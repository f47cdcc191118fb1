use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("need {requested} distinct points for k-means but only {distinct} exist")]
    DuplicateCenters { requested: usize, distinct: usize },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training fault at epoch {epoch}: {message}")]
    TrainingFault { epoch: usize, message: String },
    #[error("not a probability vector: {0}")]
    InvalidSimplex(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("malformed csv at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
