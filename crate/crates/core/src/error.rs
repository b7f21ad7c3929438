use thiserror::Error;

/// Errors raised by the simulation, regression and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("state diverged at step {step} (t = {t}) on path {path}")]
    Divergence { path: usize, step: usize, t: f64 },

    #[error("Picard iteration did not converge after {iterations} iterations (last norm {last_norm:e})")]
    NonConvergence { iterations: usize, norms: Vec<f64>, last_norm: f64 },

    #[error("regression failed at knot {knot} on stratum {stratum}: {reason}")]
    Regression { knot: usize, stratum: &'static str, reason: String },

    #[error("inner fixed point did not converge at knot {knot} on path {path}")]
    InnerFixedPoint { knot: usize, path: usize },

    #[error("non-finite cost on path {path}")]
    NonFiniteCost { path: usize },

    #[error("paths are misaligned: {0}")]
    Alignment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
