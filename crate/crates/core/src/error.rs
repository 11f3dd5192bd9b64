use thiserror::Error;

use crate::nn::ParamKey;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes or extents handed to an operation.
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unknown parameter key {0}")]
    UnknownKey(ParamKey),
    #[error("shape mismatch for {key}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { key: ParamKey, expected: Vec<usize>, got: Vec<usize> },
    #[error("architecture mismatch: {0} vs {1}")]
    ArchMismatch(String, String),
    #[error("bad format: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("undefined statistic: {0}")]
    UndefinedStat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! reject {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::InvalidInput(format!($($arg)*)))
    };
}
pub(crate) use reject;
