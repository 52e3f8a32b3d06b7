use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A function was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A dataset, batch or training configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary file failed to parse.
    #[error("{msg} at offset {offset}")]
    Parse { offset: u64, msg: String },

    /// A loss or gradient became non-finite during training.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
