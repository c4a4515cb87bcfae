//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shape or extent mismatch between operands; names both shapes.
    Dimension(String),
    /// Invalid model or operation configuration.
    Config(String),
    /// Broken internal invariant (corrupted metadata, inconsistent state).
    Internal(String),
    /// Malformed serialized data (tensor dumps).
    Format(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Internal(msg) => write!(f, "internal invariant error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
