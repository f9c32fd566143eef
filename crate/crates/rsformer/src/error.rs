//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a contract) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A non-finite value (NaN or infinity) was found where finite reals are required.
    #[error("non-finite value at index {index:?} in {context}")]
    NonFinite { context: String, index: Vec<usize> },

    /// A configuration violates its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A contract precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A matrix chain is not conformable.
    #[error("nonconformable matrix chain at link {index}: ({lhs_rows}x{lhs_cols}) x ({rhs_rows}x{rhs_cols})")]
    Nonconformable {
        index: usize,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Dataset manifest problems; lists every offending entry.
    #[error("manifest error: {reason}; offenders: {offenders:?}")]
    Manifest {
        reason: String,
        offenders: Vec<String>,
    },

    /// A checkpoint file failed to parse or validate.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss became non-finite.
    #[error("non-finite loss at step {step}")]
    LossNotFinite { step: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
