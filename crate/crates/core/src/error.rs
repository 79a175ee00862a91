use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pooling library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is outside its allowed range.
    #[error("range error: {0}")]
    Range(String),

    /// Non-finite values appeared where finite ones are required.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// A row or column that must be normalized carries no mass.
    #[error("degenerate mass: {axis} {index} of {op} sums to zero")]
    DegenerateMass {
        op: &'static str,
        axis: &'static str,
        index: usize,
    },

    /// An iterative routine ran out of iterations.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// The Sinkhorn kernel `exp(-C/eps)` underflowed.
    #[error("epsilon {epsilon} too small: {axis} {index} of the Sinkhorn kernel underflows")]
    EpsilonTooSmall {
        epsilon: f64,
        axis: &'static str,
        index: usize,
    },

    /// Gradient check tolerance exceeded.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Npy {
        path: PathBuf,
        #[source]
        source: crate::tensor_io::NpyError,
    },

    #[error("config {path}: {detail}")]
    Config { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Exit-code class of an error, as used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Usage, contract, shape or configuration problem.
    Usage,
    /// File system or file format problem.
    Io,
    /// Numerical failure (non-convergence, degenerate values, failed gradient check).
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Io => 2,
            ErrorClass::Numeric => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. } | Error::Contract(_) | Error::Range(_) | Error::Config { .. } => {
                ErrorClass::Usage
            }
            Error::Io { .. } | Error::Npy { .. } => ErrorClass::Io,
            Error::NonFinite { .. }
            | Error::DegenerateMass { .. }
            | Error::Convergence { .. }
            | Error::EpsilonTooSmall { .. }
            | Error::GradCheck(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }
}
