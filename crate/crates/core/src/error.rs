use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed audio file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("unsupported resampling {from} Hz -> {to} Hz: {reason}")]
    UnsupportedRate { from: u32, to: u32, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("clip {id} is {len} samples long, shorter than the {window}-sample window")]
    ClipTooShort { id: String, len: usize, window: usize },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("layer state error: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("model file {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
