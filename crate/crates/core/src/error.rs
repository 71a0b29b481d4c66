use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value after layer {layer} ({kind})")]
    Numeric { layer: usize, kind: &'static str },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("bad {what} file: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("missing {stage} artifact at {path}; run `mpp {stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
