use thiserror::Error;

pub type Result<T> = std::result::Result<T, HteError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HteError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular or not positive definite: {0}")]
    SingularMatrix(String),

    #[error("no convergence after {iterations} iterations (residual norm {residual_norm:e})")]
    NoConvergence {
        iterations: usize,
        residual_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("degenerate range: all samples equal to {0}")]
    DegenerateRange(f64),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("exponent overflow at record {record}: exponent {exponent}")]
    Overflow { record: usize, exponent: f64 },

    #[error("density {value:e} below floor at x = {x}")]
    LowDensity { x: f64, value: f64 },

    #[error("point {0} is outside the support of the known marginal")]
    OutOfSupport(f64),

    #[error("divergent integral: 2 h^2 beta2 = {guard} >= 1 (beta2 = {beta2}, h = {bandwidth})")]
    DivergentIntegral {
        beta2: f64,
        bandwidth: f64,
        guard: f64,
    },

    #[error("design matrix has no usable rows")]
    EmptyDesign,

    #[error("regularization failed: constraint norm {norm} still exceeds bound {bound} at the largest multiplier")]
    RegularizationFailure { norm: f64, bound: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for HteError {
    fn from(e: std::io::Error) -> Self {
        HteError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for HteError {
    fn from(e: serde_json::Error) -> Self {
        HteError::Parse(e.to_string())
    }
}

impl From<csv::Error> for HteError {
    fn from(e: csv::Error) -> Self {
        HteError::Parse(e.to_string())
    }
}
