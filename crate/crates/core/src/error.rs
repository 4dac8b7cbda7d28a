use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the operation's domain (time outside `[0, T]`,
    /// `K >= m`, empty inputs, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A drift or energy evaluated at a singular point.
    #[error("singularity: {0}")]
    Singularity(String),

    #[error("integration failed at step {step} (t = {t}): {reason}")]
    Integration { step: usize, t: f64, reason: String },

    #[error("non-finite force at state {state:?}")]
    Force { state: Vec<f64> },

    #[error("non-finite value in {what} at t = {t}")]
    NonFinite { what: String, t: f64 },

    #[error("degenerate angle: {0}")]
    DegenerateAngle(String),

    #[error("atom table: {0}")]
    Table(String),

    #[error("parse error in {}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures caused by the numerics rather than inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singularity(_)
                | Error::Integration { .. }
                | Error::Force { .. }
                | Error::NonFinite { .. }
                | Error::DegenerateAngle(_)
                | Error::Diverged { .. }
        )
    }
}
