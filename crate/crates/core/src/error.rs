use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, divisibility, call order).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity.
    #[error("numeric fault in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// The gradient oracle was handed a function that is not deterministic.
    #[error("invalid oracle: {0}")]
    InvalidOracle(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
