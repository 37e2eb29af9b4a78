use thiserror::Error;

use crate::params::ParamId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state outside the model domain: {0}")]
    Domain(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("integration exceeded {0} steps")]
    TooManySteps(usize),

    #[error("iterate left the admissible set: {0}")]
    DomainExit(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter {0:?} is not part of this problem")]
    ParameterNotInProblem(ParamId),

    #[error("invalid parameter set: {0}")]
    InvalidParameters(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("equilibrium has a negative population (component {component}, value {value:.3e})")]
    NegativePopulation { component: usize, value: f64 },

    #[error("eigenvalue iteration failed to converge")]
    EigenFailure,

    #[error("branch lost at D = {d:.9}: {reason}")]
    BranchLost { d: f64, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
