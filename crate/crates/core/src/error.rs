use thiserror::Error;

/// Errors raised by grid construction, the linear solvers and the control pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("no interior node falls inside the requested box")]
    EmptyMask,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("singular matrix: pivot {pivot:e} at row {row} below threshold {threshold:e}")]
    SingularMatrix { row: usize, pivot: f64, threshold: f64 },

    #[error("conjugate gradient stopped after {iterations} iterations at relative residual {residual:e}")]
    CgMaxIterations {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("no convergence after {iterations} iterations (last relative change {last_change:e})")]
    MaxIterations { iterations: usize, last_change: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFiniteBreakdown(&'static str),

    #[error("fixed point is not contracting: change grew for {streak} consecutive iterations, measured ratio {ratio:.4}")]
    ContractionFailure { streak: usize, ratio: f64 },

    #[error("outer iteration diverges: z-change grew for {streak} consecutive iterations, measured ratio {ratio:.4}")]
    OuterDivergence { streak: usize, ratio: f64 },

    #[error("dense space-time system with {unknowns} unknowns exceeds the limit of {limit}")]
    TooLarge { unknowns: usize, limit: usize },

    #[error("exact-norm penalty is not differentiable at psi0 = 0")]
    ZeroPointNonsmooth,

    #[error("weight center {0:?} is not strictly inside the domain")]
    InvalidCenter(Vec<f64>),

    #[error("geometry does not match the requested case: {0}")]
    CaseMismatch(String),

    #[error("invalid problem: {0}")]
    InvalidSpec(String),

    #[error("parse error at byte {offset}: expected {}", expected.join(" | "))]
    Parse { offset: usize, expected: Vec<String> },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
