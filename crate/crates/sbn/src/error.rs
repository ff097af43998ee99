//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Reduction requested over an empty sequence.
    EmptyReduction,
    /// Position index outside the tensor's (N, H, W) range.
    IndexOutOfRange { index: usize, limit: usize },
    /// Tensor or vector dimensions do not line up.
    ShapeMismatch { expected: String, got: String },
    /// A sampling configuration asks for more data than exists.
    Oversampling { requested: usize, available: usize },
    /// A named configuration field failed validation.
    InvalidParam { field: String, message: String },
    /// NaN or infinity where finite values are required.
    NonFinite { context: &'static str },
    /// Eval-mode normalization before any moving-average update.
    MovingStatsUninitialized,
    /// Layer index not registered in a sampling plan.
    UnknownLayer { layer: usize },
    /// Plan refresh with a non-increasing epoch.
    NonMonotoneEpoch { plan_epoch: u64, requested: u64 },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyReduction => write!(f, "empty reduction"),
            Error::IndexOutOfRange { index, limit } => {
                write!(f, "index {index} out of range (limit {limit})")
            }
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::Oversampling {
                requested,
                available,
            } => write!(f, "oversampling: requested {requested} of {available}"),
            Error::InvalidParam { field, message } => {
                write!(f, "invalid `{field}`: {message}")
            }
            Error::NonFinite { context } => write!(f, "non-finite input: {context}"),
            Error::MovingStatsUninitialized => {
                write!(f, "moving statistics not initialized")
            }
            Error::UnknownLayer { layer } => write!(f, "unknown layer {layer}"),
            Error::NonMonotoneEpoch {
                plan_epoch,
                requested,
            } => write!(
                f,
                "plan refresh epoch {requested} not after plan epoch {plan_epoch}"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
