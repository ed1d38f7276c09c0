use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or input data (bad sizes, duplicate names, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's shape or type contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// NaN/inf where a finite value was required.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use contract_err;
