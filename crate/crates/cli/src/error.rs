use thiserror::Error;

/// CLI failures. Each variant owns a distinct process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("CFL refusal: {0}")]
    Cfl(String),

    #[error("memory guard: {0}")]
    Memory(String),

    #[error("{0}")]
    GridMismatch(String),

    #[error("rate experiment failed: {0}")]
    Rate(String),

    #[error("structural check failed: {0}")]
    Structure(String),

    #[error(transparent)]
    Solver(#[from] fbsplit::Error),
}

impl CliError {
    /// 2 config, 3 CFL, 4 memory guard, 5 grid mismatch, 6 rate run failure,
    /// 7 structural violation, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Cfl(_) => 3,
            CliError::Memory(_) => 4,
            CliError::GridMismatch(_) => 5,
            CliError::Rate(_) => 6,
            CliError::Structure(_) => 7,
            CliError::Solver(e) => match e {
                fbsplit::Error::InvalidParameter(_) | fbsplit::Error::NoReduction(_) => 2,
                fbsplit::Error::Cfl { .. } | fbsplit::Error::UpwindDirection { .. } => 3,
                fbsplit::Error::MemoryBudget { .. } => 4,
                fbsplit::Error::GridMismatch(_) => 5,
                _ => 1,
            },
        }
    }
}
