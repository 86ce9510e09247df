//! Dense `f64` tensors, a reverse-mode computation record, and Adam.

mod adam;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, AdamHyper, Moments};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
