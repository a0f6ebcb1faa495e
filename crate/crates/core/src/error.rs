use std::path::PathBuf;

use thiserror::Error;

use crate::ode::OdeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },

    #[error(
        "no superfluid steady state: gamma = {gamma} exceeds the maximal supercurrent rate 4J = {limit}"
    )]
    NoSuperfluidSteadyState { gamma: f64, limit: f64 },

    #[error("integration failed: {0}")]
    Ode(#[from] OdeError),

    #[error("reservoir depleted by {fraction:.3} (limit {limit}) at t = {time:.6e} s")]
    ReservoirDepleted { time: f64, fraction: f64, limit: f64 },

    #[error("Newton refinement did not converge in grid cell N in [{n_lo:.4}, {n_hi:.4}], phase in [{phi_lo:.4}, {phi_hi:.4}]")]
    NewtonFailed {
        n_lo: f64,
        n_hi: f64,
        phi_lo: f64,
        phi_hi: f64,
    },

    #[error("no convergence to a steady state within t_max = {t_max:.6e} s")]
    Divergent { t_max: f64 },

    #[error("records cannot be paired: {0}")]
    Pairing(String),

    #[error("steady state is not unique: no dissipation channel is active")]
    NonUniqueSteadyState,

    #[error("Liouvillian too large: D = {dim} gives D^2 = {dim_sq}, cap is {cap}")]
    DimensionOverflow { dim: usize, dim_sq: usize, cap: usize },

    #[error("integration accuracy lost: density-matrix eigenvalue {eigenvalue:.3e} at t = {time:.6e}")]
    IntegrationAccuracy { time: f64, eigenvalue: f64 },

    #[error("configuration error at line {line}, key `{key}`: {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be finite, got {value}")))
    }
}
