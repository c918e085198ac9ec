use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration invariant does not hold.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or inconsistent graph / checkpoint file.
    #[error("{}:{line}: {msg}", path.display())]
    Ingest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    /// Shape or tape misuse.
    #[error("structural error: {0}")]
    Structural(String),
    /// NaN or infinity produced by a computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn ingest(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
