//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("{op}: dimension mismatch, lhs shape {lhs:?} vs rhs shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A hyperparameter or argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Corpus or file contents are unusable.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint and vocabulary (or config) do not belong together.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
