use thiserror::Error;

/// Failures surfaced by the numerical routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("quadrature did not converge: estimate {value:e}, error {error:e} after {segments} segments")]
    NonConvergence { value: f64, error: f64, segments: usize },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("interlacing violated: {0}")]
    Interlacing(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
