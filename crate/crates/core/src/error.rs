use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model is not Tonelli: {0}")]
    ModelNotTonelli(String),

    #[error("control {value} at node {node:?} (level {level}) leaves the box |xi| <= {cap}")]
    InvalidControl { level: i64, node: Vec<i64>, value: f64, cap: f64 },

    #[error("CFL violation at level {level}, node {node:?}: |H_p| = {speed} > {cap}")]
    CflViolation { level: i64, node: Vec<i64>, speed: f64, cap: f64 },

    #[error("step sizes are inadmissible: {0}")]
    InadmissibleStepSizes(String),

    #[error("slope {observed} at level {level} exceeds the bound r = {bound}")]
    SlopeBoundExceeded { level: i64, observed: f64, bound: f64 },

    #[error("numeric failure at level {level}, node {node:?}: {what}")]
    NumericFailure { level: i64, node: Vec<i64>, what: String },

    #[error("no convergence after {periods} periods; last bracket [{lower}, {upper}]")]
    NoConvergence { periods: usize, lower: f64, upper: f64 },

    #[error("fixed point not reached after {iterations} sweeps; residual {residual}")]
    FixedPointNotReached { iterations: usize, residual: f64 },

    #[error("property failure: {0}")]
    PropertyFailure(String),

    #[error("model is not autonomous: {0}")]
    NotAutonomous(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("refused: {0}")]
    TooLarge(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
