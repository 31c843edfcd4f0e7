use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("storage exhausted on device {device}")]
    StorageExhausted { device: PathBuf },

    #[error("out of range: {0}")]
    Bounds(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt run {run}: {msg}")]
    Corrupt { run: String, msg: String },

    #[error("source contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("in use: {0}")]
    InUse(String),

    #[error("did not converge within {0} supersteps")]
    NonConvergence(u64),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
