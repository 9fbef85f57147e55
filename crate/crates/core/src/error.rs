use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, settings or configuration values.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Shapes or sizes that do not line up (frame vs. patch grid, logits grids, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A file that exists but cannot be parsed.
    #[error("malformed file {path} at byte {offset}: {reason}")]
    Malformed {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Not enough data of the requested kind (empty splits, too few pixels, ...).
    #[error("insufficient data: {0}")]
    Data(String),

    /// Non-finite losses, diverging optimisation, digest mismatches between model parts.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn malformed(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Malformed { .. } => "malformed",
            Error::Data(_) => "data",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
        }
    }
}
