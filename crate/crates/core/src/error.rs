use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({0:.4}, {1:.4}, {2:.4}) mm lies outside the volume")]
    OutOfBounds(f64, f64, f64),

    #[error("volume is already calibrated")]
    AlreadyCalibrated,

    #[error("region has {available} vertices, {requested} patches requested")]
    InsufficientRegion { available: usize, requested: usize },

    #[error("patch {0}: every profile left the volume")]
    EmptyPatch(usize),

    #[error("MTF fit diverged: no start improved on the constant model")]
    FitDiverged,

    #[error("noise covariance is not positive definite (sigma_xi too small?)")]
    NotPositiveDefinite,

    #[error("importance weights degenerate (ESS {ess:.3})")]
    DegenerateWeights { ess: f64 },

    #[error("no patch produced an estimate")]
    NoPatchSucceeded,

    #[error("length mismatch: {estimates} estimates vs {reference} reference values")]
    LengthMismatch { estimates: usize, reference: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {field}: {msg}")]
    Format { path: PathBuf, field: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
