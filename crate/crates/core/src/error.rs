use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The Gaussian mass of a quantizer cell underflowed to zero.
    #[error("empty cell: Gaussian mass of [{lo}, {hi}) underflows for mean {mu} and variance {var}")]
    EmptyCell { lo: f64, hi: f64, mu: f64, var: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
