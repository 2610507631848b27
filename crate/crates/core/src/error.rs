use thiserror::Error;

use crate::octree::TransferVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("interpolation order must be at least 2, got {0}")]
    InvalidOrder(usize),

    #[error("multi-index {index:?} out of range for order {order}")]
    InvalidIndex { index: [usize; 3], order: usize },

    #[error("point {point:?} lies outside the cell")]
    OutsideCell { point: [f64; 3] },

    #[error("kernel evaluated at coincident points")]
    SingularEvaluation,

    #[error("cells are not well separated")]
    NotAdmissible,

    #[error("kernel has no homogeneity degree; operators cannot be rescaled")]
    UnsupportedScaling,

    #[error("matrix contains non-finite entries")]
    InvalidMatrix,

    #[error("particle {index} lies outside the bounding box")]
    OutOfBounds { index: usize },

    #[error("cells live on different levels ({target} vs {source_level})")]
    LevelMismatch { target: usize, source_level: usize },

    #[error("{variant} needs an estimated {required} bytes, budget is {budget}")]
    BudgetExceeded {
        variant: String,
        required: u64,
        budget: u64,
    },

    #[error("no M2L operator for transfer vector {transfer} on level {level}")]
    PrecomputeIncomplete {
        level: usize,
        transfer: TransferVector,
    },

    #[error("reference set for error measurement is empty")]
    EmptyReference,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
