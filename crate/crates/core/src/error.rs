use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: expected {expected}, found {found}")]
    GeometryMismatch { expected: String, found: String },

    #[error("field length {found} does not match expected {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("coefficient on edge {edge} is not strictly positive ({value})")]
    NonPositiveCoefficient { edge: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("right-hand side has non-zero torus mean {mean:e}; massless problem is not solvable")]
    Unsolvable { mean: f64 },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("problem size {size} exceeds the limit {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("quadrature did not converge: coarse {coarse:e}, fine {fine:e}")]
    QuadratureNotConverged { coarse: f64, fine: f64 },

    #[error("methods disagree: {first:e} vs {second:e}")]
    MethodDisagreement { first: f64, second: f64 },

    #[error("hermite truncation error {error:e} above threshold {threshold:e}")]
    Truncation { error: f64, threshold: f64 },

    #[error("optimizer did not converge; best value {best:e}")]
    OptimizerNotConverged { best: f64, best_point: Vec<f64> },

    #[error("{excluded} of {total} samples excluded, budget is {budget}")]
    ExclusionBudget {
        excluded: usize,
        total: usize,
        budget: usize,
    },

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
