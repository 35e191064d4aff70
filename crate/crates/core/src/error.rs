use thiserror::Error;

/// Errors produced by the model, solvers and experiment harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch for `{name}`: expected {expected}, got {actual}")]
    DimensionMismatch {
        name: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite value in `{name}` at index {index}")]
    NonFinite { name: &'static str, index: usize },

    #[error("{what} did not converge (residual {residual:e})")]
    NoConvergence { what: &'static str, residual: f64 },

    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("bracket [{lo}, {hi}] does not straddle the concentration threshold")]
    BracketDoesNotStraddle { lo: f64, hi: f64 },

    #[error("seed plans differ between scenarios `{first}` and `{second}`")]
    SeedPlanMismatch { first: String, second: String },

    #[error("run failed for seed {seed}: {source}")]
    SeedFailed { seed: u64, source: Box<Error> },

    #[error("sweep failed at {parameter} = {value}: {source}")]
    SweepPointFailed {
        parameter: String,
        value: f64,
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::InvalidParameter { .. }
            | Error::DimensionMismatch { .. }
            | Error::SeedPlanMismatch { .. } => true,
            Error::SeedFailed { source, .. } | Error::SweepPointFailed { source, .. } => {
                source.is_config_error()
            }
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
