use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image error: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown {kind} token {token:?}")]
    UnknownToken { kind: &'static str, token: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("tally mismatch for {key}: declared {declared}, found {actual}")]
    TallyMismatch {
        key: String,
        declared: usize,
        actual: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("missing prediction for entry {0:?}")]
    MissingPrediction(String),

    #[error("empty domain stream: {0}")]
    EmptyStream(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
