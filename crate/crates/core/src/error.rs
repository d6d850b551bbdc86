use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("cannot densify empty depth")]
    EmptyDepth,

    #[error("singular interpolation system: {0}")]
    Singular(String),

    #[error("no sequence metadata found in {}", .0.display())]
    NoMetadata(PathBuf),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("split requires {0}")]
    Split(String),

    #[error("forward cache is stale (cache version {cache}, params version {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite loss at step {step}: {terms}")]
    NonFinite { step: usize, terms: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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
