use thiserror::Error;

/// Errors produced by the upsampling library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or inputs that violate a documented invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A residual block produced a non-finite value.
    #[error("non-finite residual in block {block}")]
    NonFinite { block: usize },

    /// The solver could not make progress.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Failure while evaluating a pipeline against ground truth.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Malformed PFM/PLY data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
