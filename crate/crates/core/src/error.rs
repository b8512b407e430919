use thiserror::Error;

/// Errors shared across the fluid-model crates.
#[derive(Debug, Clone, Error)]
pub enum FluidError {
    /// An argument fell outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A quantity was requested outside the range it can take.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// The law has no density where one is required; callers must switch to
    /// the Stieltjes (dM) path.
    #[error("undefined: {0} (law has no density; use the Stieltjes path)")]
    NoDensity(String),

    /// The requested derivation needs model features the inputs lack
    /// (e.g. two-parameter densities for an atomic service law).
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    /// Structurally invalid input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Scenario or parameter configuration error.
    #[error("config error: {0}")]
    Config(String),

    /// The inner fixed point of a time step failed to converge.
    #[error("step failure at t = {t}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    StepFailure {
        t: f64,
        iterations: usize,
        residual: f64,
    },

    /// Numeric overflow or non-finite intermediate value.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, FluidError>;
