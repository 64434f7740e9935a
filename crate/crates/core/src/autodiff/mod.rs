//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computation is define-by-run: every operation on a [`Var`] evaluates
//! eagerly and appends a node to its [`Graph`]. [`Graph::backward`] walks the
//! tape in reverse and returns fresh [`Gradients`]; accumulating them into
//! persistent parameter buffers (and zeroing those buffers) is the caller's job.

mod check;
mod conv;
mod graph;
mod tensor;

pub use check::{analytic_gradients, grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use conv::Padding;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
