//! Dense tensors, a reverse-mode graph, and a finite-difference checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{gelu, Gradients, Graph, Var};
pub use tensor::{log_softmax, log_softmax_slice, softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for extent {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite function value {0} during gradient check")]
    NonFinite(f64),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
