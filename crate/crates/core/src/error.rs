use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input data violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration value is out of range.
    #[error("configuration error: {0}")]
    Config(String),
    /// A text record could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// The detector backend failed or broke its contract.
    #[error("backend error: {0}")]
    Backend(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! validation {
    ($($arg:tt)*) => { $crate::Error::Validation(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use validation;
