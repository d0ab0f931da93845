use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),

    /// The requested effective noise multiplier cannot be split between the
    /// update and count queries.
    #[error("calibration infeasible: z = {z} must be < {bound_name} = {bound}")]
    CalibrationInfeasible {
        z: f64,
        bound: f64,
        bound_name: &'static str,
    },

    #[error("non-finite result: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("{path}: row {row}: {message}")]
    Ingest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("divergence in round {round}{}: {message}", client.as_ref().map(|c| format!(" (client {c})")).unwrap_or_default())]
    Divergence {
        round: u64,
        client: Option<String>,
        message: String,
    },

    #[error("target epsilon {target} unreachable for noise multiplier in [{lo}, {hi}]")]
    Unreachable { target: f64, lo: f64, hi: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from a bad configuration rather than a
    /// failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::CalibrationInfeasible { .. }
                | Error::InvalidArgument(_)
                | Error::Ingest { .. }
                | Error::Json(_)
        )
    }
}
