use thiserror::Error;

use crate::synth::Arm;

/// Errors raised by the simulation lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("spectrum invariant violated: {0}")]
    InvalidSpectrum(String),

    #[error("rank undefined at k = {k}")]
    RankUndefined { k: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty_group({0})")]
    EmptyGroup(Arm),

    #[error("propensity_out_of_range: row {row} has propensity {value}")]
    PropensityOutOfRange { row: usize, value: f64 },

    #[error("analytic_unavailable: group covariance has no closed form for {0} propensity")]
    AnalyticUnavailable(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("k_star_undefined: no k satisfies r_k >= b n for n = {n}")]
    KStarUndefined { n: usize },

    #[error("insufficient_points: need at least {needed} grid points, found {found}")]
    InsufficientPoints { needed: usize, found: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
