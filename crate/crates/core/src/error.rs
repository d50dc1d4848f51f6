use thiserror::Error;

use crate::dynamics::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The operation needs the bistable regime (a > a*).
    #[error("operation requires the bistable regime: a = {a} does not exceed the coexistence threshold a* = {threshold}")]
    Regime { a: f64, threshold: f64 },

    #[error("integration failed at t = {t}: {reason}")]
    Integration {
        t: f64,
        reason: String,
        partial: Box<Trajectory>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::NonFinite(_)
                | Error::Precondition(_)
                | Error::Regime { .. }
                | Error::Parse { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Integration { .. })
    }
}
