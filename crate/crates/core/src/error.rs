use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A model or configuration invariant does not hold. `field` names the
    /// offending parameter using its dotted document path.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The rollout left the documented blow-up envelope.
    #[error("simulation diverged at t = {t:.4} s: {detail}")]
    Divergence { t: f64, detail: String },

    #[error("mass matrix is singular for the {chain} chain")]
    SingularMassMatrix { chain: &'static str },

    #[error("recording has {found} full cycles, at least {required} are needed")]
    TooFewCycles { found: usize, required: usize },

    #[error("invalid reference path: {0}")]
    InvalidPath(String),

    #[error("coefficient of variation is undefined for zero mean")]
    ZeroMean,

    #[error("empty sample")]
    EmptySample,

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
