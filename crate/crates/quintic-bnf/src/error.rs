use thiserror::Error;

/// Errors raised by the library operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mode set mismatch: {0}")]
    ModeSetMismatch(String),
    #[error("invalid mode set: {0}")]
    InvalidModeSet(String),
    #[error("polynomial is not real-valued")]
    NonReal,
    #[error("half-degree {0} exceeds the supported maximum {max}", max = crate::poly::MAX_HALF_DEGREE)]
    DegreeOverflow(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:.3e}); try a smaller step")]
    NewtonNonConvergence { iterations: usize, residual: f64 },
    #[error("insufficient quadrature nodes: {given} < {required}")]
    InsufficientNodes { given: usize, required: usize },
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("eigen-solver failure: {0}")]
    EigenSolver(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
