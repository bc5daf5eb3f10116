use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("NLP solver reported infeasibility")]
    Infeasible,
    #[error("NLP solver hit the iteration cap without converging")]
    MaxIterations,
    #[error("bisection bracket invalid: {0}")]
    Bracket(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
