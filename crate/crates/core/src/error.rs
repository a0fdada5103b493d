use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in layer {layer} ({context})")]
    Numeric { layer: usize, context: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{phase} training diverged at step {step}: {detail}")]
    Divergence {
        phase: &'static str,
        step: usize,
        detail: String,
    },

    #[error("phase ordering: `{requested}` requires the `{missing}` phase to have run first ({path})")]
    Ordering {
        requested: String,
        missing: String,
        path: PathBuf,
    },

    #[error("calibration infeasible: {reason}{}", eps_note(.min_epsilon))]
    CalibrationInfeasible {
        reason: String,
        min_epsilon: Option<f64>,
    },

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn eps_note(e: &Option<f64>) -> String {
    e.map(|e| format!(" (minimal achievable epsilon {e:.6})")).unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
