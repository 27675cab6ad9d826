use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("prototype error: {0}")]
    Prototype(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rehearsal buffer is empty")]
    EmptyBuffer,

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("manifest validation failed: {0}")]
    Manifest(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite {term} loss on slide {slide_id}")]
    NonFiniteLoss { slide_id: String, term: &'static str },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
