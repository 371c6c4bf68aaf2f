use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported corruption kind `{0}`")]
    UnsupportedCorruption(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("attempted to modify frozen parameters in section `{0}`")]
    Frozen(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    NonFinite {
        epoch: usize,
        step: u64,
        snapshot: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("division by zero baseline error for corruption kind `{0}`")]
    ZeroBaseline(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
