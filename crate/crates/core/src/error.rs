use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix has no nonzero singular values")]
    NoNonzeroSingularValues,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    /// A new direction was detected but the row space already has dimension r.
    #[error("subspace augmentation would exceed feature dimension r = {r}; instance is not rank-{r} realizable")]
    RankExceeded { r: usize },

    #[error("malformed search grid: {0}")]
    MalformedGrid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
