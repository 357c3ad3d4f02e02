use thiserror::Error;

use crate::steady_state::NewtonFailure;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid function has {found} values, grid has {expected} nodes")]
    GridMismatch { expected: usize, found: usize },

    #[error("singular linear system in {context} (condition estimate {condition_estimate:e})")]
    SingularSystem {
        context: &'static str,
        condition_estimate: f64,
    },

    #[error("no positive-to-negative sign change of B on [{lambda_min}, {lambda_max}]")]
    NoSignChange { lambda_min: f64, lambda_max: f64 },

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("non-positive denominator {0:e} in critical gamma (electron solution lost positivity)")]
    NonPositiveDenominator(f64),

    #[error("state is not admissible: min field {min_field:e} <= floor {floor:e}")]
    Admissibility { min_field: f64, floor: f64 },

    #[error("{0}")]
    Newton(Box<NewtonFailure>),

    #[error("continuation step size {step:e} fell below minimum {min_step:e}")]
    StepFailure { step: f64, min_step: f64 },

    #[error("integrator step size underflow at r = {r}")]
    StepUnderflow { r: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
