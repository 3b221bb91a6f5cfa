use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numerics(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("corrupt artifact at {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
