use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("CFL condition violated: certificate {certificate:.6} >= 1")]
    Cfl { certificate: f64 },

    #[error("upwind transport requires a non-negative emission rate, found {min_rate:.6} on the box")]
    UpwindDirection { min_rate: f64 },

    #[error("model `{0}` has no registered one-dimensional reduction")]
    NoReduction(String),

    #[error("model `{0}` has no closed-form Brownian map")]
    NoBrownianMap(String),

    #[error("the particle scheme needs an indicator terminal condition, model `{0}` has none")]
    NonIndicatorTerminal(String),

    #[error("lattice needs {required_mb} MB, budget is {budget_mb} MB")]
    MemoryBudget { required_mb: u64, budget_mb: u64 },

    #[error("lattice node {key:?} at level {level} is missing child {child:?}")]
    MissingChild {
        level: usize,
        key: Vec<i32>,
        child: Vec<i32>,
    },

    #[error("non-finite loss at time step {step}, iteration {iteration}: {loss}")]
    NonFiniteLoss {
        step: usize,
        iteration: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
