use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("backward requires a recorded scalar loss: {0}")]
    Backward(&'static str),
    #[error("solver state became non-finite at step {step}")]
    SolverDiverged { step: usize },
    #[error("posterior weights underflow at probe {probe}: nearest chord point is {scaled_distance:.1} bandwidths away")]
    WeightUnderflow { probe: usize, scaled_distance: f64 },
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("plan is not normalized: total mass {mass}")]
    UnnormalizedPlan { mass: f64 },
    #[error("dropped {dropped} of {total} generated pairs (limit 1%)")]
    TooManyDropped { dropped: usize, total: usize },
    #[error("not enough samples for {0}")]
    TooFewSamples(&'static str),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
