//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single tensor with a shape the operation cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Invalid configuration value.
    Config(String),
    /// Malformed input data (labels out of range, inconsistent counts, ...).
    Data(String),
    /// Malformed binary payload; `offset` is the byte where parsing failed.
    Format { offset: usize, reason: String },
    /// An operation was called before the state it needs exists.
    State(&'static str),
    /// A loss or gradient stopped being finite.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::BadShape { op, shape, reason } => {
                write!(f, "{op}: bad shape {shape:?}: {reason}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format { offset, reason } => {
                write!(f, "format error at byte {offset}: {reason}")
            }
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
