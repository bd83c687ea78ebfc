//! Dense 2-D tensors and a small reverse-mode autodiff engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use graph::{log_softmax, sigmoid, softmax, sum_axis, xlogx, Axis, Gradients, Graph, Var};
pub use tensor::Tensor;
