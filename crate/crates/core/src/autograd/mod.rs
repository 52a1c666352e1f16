//! A small reverse-mode automatic differentiation engine over [`Tensor`]s.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod graph;
pub mod gradcheck;
mod kernels;
mod ops;

pub use graph::{Gradients, Graph, Mode, Var};
