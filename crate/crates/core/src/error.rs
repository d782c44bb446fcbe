use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("sampling rejected {attempts} consecutive draws (coincident sites)")]
    SamplingRejected { attempts: usize },

    #[error("sites {i} and {j} are {distance:e} r0 apart; coupling would overflow")]
    CoincidentSites { i: usize, j: usize, distance: f64 },

    #[error("cannot remove input/output site {0}")]
    ProtectedSite(usize),

    #[error("site index {index} out of range for {n_sites} sites")]
    SiteOutOfRange { index: usize, n_sites: usize },

    #[error("dimension mismatch: {left} vs {right} sites")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge at t = {t}: residual {residual:e}")]
    Quadrature { t: f64, residual: f64 },

    #[error("trace drifted by {drift:e} at t = {t} after {steps} steps")]
    TraceDrift { t: f64, drift: f64, steps: usize },

    #[error("MCL did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("store corrupted: {0}")]
    Corrupt(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
