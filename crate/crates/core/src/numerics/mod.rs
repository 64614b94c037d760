//! Minimal dense f64 tensors with reverse-mode gradients.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod nn;
mod params;
mod tensor;

pub use graph::{adaptive_ranges, softmax_rows, Graph, Var};
pub use kernels::ConvGeom;
pub use params::{Gradients, OptimizerKind, Optimizer, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
