use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("class `{class}`: {reason}")]
    Class { class: String, reason: String },

    #[error("model is not initialized: {0}")]
    Uninitialized(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("backbone hash mismatch: calibration expects {expected}, found {found}")]
    BackboneMismatch { expected: String, found: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing artifact {path}: build it with `{command}`")]
    MissingArtifact { path: PathBuf, command: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
