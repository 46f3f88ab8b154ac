use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("combinatorial limit exceeded: {size} > {limit} (2^n subset expansion)")]
    CombinatorialLimit { size: usize, limit: usize },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("point is outside the barrier domain (min residual {min_residual:e})")]
    OutsideDomain { min_residual: f64 },

    #[error("active-set iteration limit ({0}) exceeded")]
    CyclingGuard(usize),

    #[error("Newton did not converge in {iterations} iterations (decrement {decrement:e})")]
    NotConverged { iterations: usize, decrement: f64 },

    #[error("degenerate active set {0}: principal submatrix is singular")]
    DegenerateActiveSet(String),

    #[error("unbounded: {0}")]
    Unbounded(String),

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("empty set: {0}")]
    Empty(&'static str),

    #[error("all {0} perturbed samples were infeasible")]
    AllSamplesInfeasible(usize),

    #[error("policy failed at step {step}: {source}")]
    Policy {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("problem file: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("dataset: {0}")]
    Dataset(String),
}
