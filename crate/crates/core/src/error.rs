use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate environment: largest cluster has {sites} site(s), need at least 2")]
    DegenerateEnvironment { sites: usize },

    #[error("invalid rate function: {0}")]
    InvalidRate(String),

    #[error("partition function diverges at fugacity {phi} (no geometric decay within {cap} terms)")]
    Divergence { phi: f64, cap: usize },

    #[error("root finding for fugacity at density {rho} did not converge")]
    RootFinding { rho: f64 },

    #[error("absorbing state: total jump rate is zero")]
    Absorbing,

    #[error("occupancy overflow at site {site}")]
    OccupancyOverflow { site: usize },

    #[error("rate structure inconsistent: incremental {incremental}, recomputed {recomputed}")]
    RateMismatch { incremental: f64, recomputed: f64 },

    #[error("conjugate gradient did not converge: relative residual {residual:e} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("environment mismatch: {0}")]
    EnvironmentMismatch(String),

    #[error("quadrature did not converge (last change {change:e})")]
    Quadrature { change: f64 },

    #[error("insufficient connected samples at separation {separation}: {count} < {required}")]
    InsufficientSamples { separation: usize, count: usize, required: usize },

    #[error("malformed environment file: {0}")]
    Format(String),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
