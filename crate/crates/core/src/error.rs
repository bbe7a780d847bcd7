use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Extents of two operands do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value is outside the domain an operation accepts.
    #[error("argument error: {0}")]
    Argument(String),

    /// A tensor file or bundle could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// A bundle is missing a required entry.
    #[error("missing entry `{entry}` in bundle {}", path.display())]
    MissingEntry { entry: String, path: PathBuf },

    /// A caller-supplied callback returned data violating its contract.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}

macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Argument(format!($($arg)*))
    };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
