//! Dense tensors, reverse-mode differentiation and the finite-difference
//! oracle used to check it.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    finite_diff_grad, max_gradient_error, max_param_gradient_error, relative_error,
};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
