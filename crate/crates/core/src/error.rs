//! Error type shared across the library.

use std::fmt;

pub type Result<T> = std::result::Result<T, SoberError>;

#[derive(Debug)]
pub enum SoberError {
    /// Input dimensions disagree with what the receiving object was built with.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Cholesky factorisation failed even at the maximum jitter level.
    Factorization {
        size: usize,
    },
    /// A parameter fails its documented invariant.
    InvalidArgument(String),
    /// Importance weights collapsed to zero or NaN; the effective sample size is 0.
    DegenerateWeights,
    /// The LP solver reported an infeasible program. The uniform candidate
    /// weights are always feasible, so this indicates an internal defect.
    LpInternal(String),
    /// The user-supplied oracle failed; the solver returns a partial history.
    Oracle(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for SoberError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SoberError::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected dimension {expected}, got {got}"),
            SoberError::Factorization { size } => write!(
                f,
                "cholesky factorisation of the {size}x{size} matrix failed after maximum jitter"
            ),
            SoberError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            SoberError::DegenerateWeights => {
                write!(
                    f,
                    "all importance weights are zero or NaN (effective sample size 0)"
                )
            }
            SoberError::LpInternal(msg) => write!(f, "internal LP solver error: {msg}"),
            SoberError::Oracle(msg) => write!(f, "oracle evaluation failed: {msg}"),
            SoberError::Io(e) => write!(f, "io error: {e}"),
            SoberError::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for SoberError {}

impl From<std::io::Error> for SoberError {
    fn from(e: std::io::Error) -> Self {
        SoberError::Io(e)
    }
}

impl From<serde_json::Error> for SoberError {
    fn from(e: serde_json::Error) -> Self {
        SoberError::Json(e)
    }
}
