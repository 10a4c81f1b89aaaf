//! Minimal reverse-mode differentiable tensor substrate.

mod conv;
pub(crate) mod float;
pub mod gradcheck;
pub mod init;
mod ops;
mod rng;
mod tensor;

pub use conv::{Conv2dSpec, RunningStats};
pub use float::Float;
pub use gradcheck::{gradcheck, gradcheck_resampled, GradcheckOptions, GradcheckReport};
pub use ops::AttnMask;
pub use rng::RngState;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("{what} {index} out of range (bound {bound})")]
    Range { what: &'static str, index: usize, bound: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
