use thiserror::Error;

/// Errors produced by the samplers, integrators and solvers in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value encountered: {context}")]
    Divergence { context: String },

    #[error("query point {x} outside forward endpoint range [{lo}, {hi}] at t = {t}")]
    Extrapolation { t: f64, x: f64, lo: f64, hi: f64 },

    #[error(
        "forward map is not monotone at t = {t} (between initial points {index} and {next}); \
         refine the spatial grid or the time step"
    )]
    DiffeomorphismViolation { t: f64, index: usize, next: usize },

    #[error("quadrature did not reach tolerance {tolerance:e} (last estimate {estimate:e})")]
    Tolerance { tolerance: f64, estimate: f64 },

    #[error("finite-difference jacobian is singular near {point:?}")]
    Conditioning { point: Vec<f64> },

    #[error("newton iteration stalled after {iterations} iterations (residual {residual:e})")]
    Iteration { iterations: usize, residual: f64 },

    #[error("target {target} outside the range of H on the domain")]
    Range { target: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
