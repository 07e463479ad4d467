use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular triangular system: diagonal entry {index} is {value:e}")]
    SingularDiagonal { index: usize, value: f64 },

    #[error("matrix is not orthogonal: ||W^T W - I||_F = {0:e}")]
    NotOrthogonal(f64),

    #[error("Gram matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("dual coefficients disagree between the two solves by {0:e}")]
    DualMismatch(f64),

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
