use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid coefficient at element {element}: {value}")]
    InvalidCoefficient { element: usize, value: f64 },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate initialization: misfit term of flux {flux} is {value:e}")]
    DegenerateInitialization { flux: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { expected, found })
    }
}
