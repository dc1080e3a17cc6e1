use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape { context: &'static str, expected: Vec<usize>, actual: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{dim} = {value} is not divisible by {factor}")]
    NotDivisible { dim: &'static str, value: usize, factor: usize },
    #[error("phase mismatch: expected {expected}, found {found}")]
    Phase { expected: &'static str, found: &'static str },
    #[error("missing loss component: {0}")]
    MissingComponent(&'static str),
    #[error("missing parameter: {0}")]
    MissingParameter(String),
    #[error("frozen parameter {0} changed during training")]
    FrozenDrift(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("probability outside (0, 1): {0}")]
    Probability(f64),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(context: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape { context, expected: expected.to_vec(), actual: actual.to_vec() }
}
