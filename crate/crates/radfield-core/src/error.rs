//! Error type shared by the fallible core APIs.
//!
//! Shape conformance inside the tensor graph is enforced with panics (the
//! graph is built by library code, so a mismatch is a programming error and
//! the panic message names both shapes). `CoreError` covers the cases a
//! caller can plausibly hit with runtime data: bad transform sizes, invalid
//! hyperparameters, non-finite inputs.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// An input dimension does not satisfy an operation's requirements.
    BadDimension(String),
    /// A configuration value is outside its legal range.
    BadParameter(String),
    /// An input contained NaN or infinity where finite values are required.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::BadDimension(msg) => write!(f, "bad dimension: {msg}"),
            CoreError::BadParameter(msg) => write!(f, "bad parameter: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite input: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
