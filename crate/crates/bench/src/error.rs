use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] chebfmm::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("usage: {0}")]
    Usage(String),
}

impl BenchError {
    /// Process exit code: 2 for an exhausted memory budget, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Core(chebfmm::Error::BudgetExceeded { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
