use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Slip angles are undefined when the longitudinal speed drops below the guard.
    #[error("tire model undefined: |vx| = {vx:.6} m/s is below the low-speed guard of {guard} m/s")]
    LowSpeed { vx: f64, guard: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
