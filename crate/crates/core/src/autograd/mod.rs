//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with a
//! backward closure; [`Graph::backward`] sweeps the tape in reverse. All
//! arithmetic is double precision so central finite differences can be used
//! as an independent check on every gradient.

pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{log_softmax_tensor, sigmoid, softmax_tensor, softplus};
pub use tensor::{numel, split_axis, strides, Tensor};
