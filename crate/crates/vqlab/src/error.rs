//! Error type shared across the crate.

use std::fmt;

/// Errors produced by validation and by operations on invalid inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input contained NaN or infinity where finite values are required.
    NonFinite(String),
    /// Matrix or vector dimensions do not agree.
    ShapeMismatch(String),
    /// An operation was given an empty collection it cannot work on.
    EmptyInput(String),
    /// The problem instance cannot be solved as posed (e.g. fewer points than codes).
    Infeasible(String),
    /// Input is valid in shape but degenerate for the operation
    /// (e.g. a zero coordinate where a sign derivative is needed).
    DegenerateInput(String),
    /// An index referred outside the addressed collection.
    IndexOutOfRange { index: usize, len: usize },
    /// A recorded tape no longer matches the parameters it was taken from.
    StaleTape,
    /// A configuration value violates its documented bounds.
    InvalidConfig(String),
    /// A serialized artifact could not be parsed.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFinite(msg) => write!(f, "non-finite input: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::EmptyInput(msg) => write!(f, "empty input: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Error::StaleTape => write!(f, "tape is stale: parameters changed since the forward pass"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
