use thiserror::Error;

/// Errors raised by the estimation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("weighted cross-product is singular: design column {column} is linearly dependent on earlier columns")]
    RankDeficient { column: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fluctuation step failed: {0}")]
    Fluctuation(String),

    #[error("undefined contrast: {0}")]
    UndefinedContrast(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("variance estimation failed: {0}")]
    Variance(String),
}

pub type Result<T> = std::result::Result<T, Error>;
