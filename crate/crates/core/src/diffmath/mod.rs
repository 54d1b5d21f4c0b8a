//! Small dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built once with builder calls, then evaluated against a set
//! of [`Bindings`]. Gradients are accumulated in reverse insertion order, so
//! results are bit-reproducible for identical inputs.

mod check;
mod graph;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Bindings, Gradients, Graph, NodeId, ParamId, Trace};
pub use tensor::Tensor;

pub(crate) use graph::{pairwise_sq_dist_raw, transpose_raw};
