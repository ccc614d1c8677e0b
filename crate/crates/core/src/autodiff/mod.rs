//! Dense `f64` tensors with a tape-based reverse-mode gradient graph.
//!
//! A [`Graph`] is built fresh for every forward pass and discarded after
//! [`Graph::backward`]. Values are immutable once recorded; gradients come
//! back in a separate [`Gradients`] map keyed by leaf.

mod grad_check;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use grad_check::{grad_check, grad_check_inputs, grad_check_params, relative_error, GradCheckOptions, GradCheckReport, Worst};
pub use graph::{Gradients, Graph, Var};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
