//! Minimal 64-bit tensor autograd used by the encoders and losses.

mod graph;
mod params;
mod tensor;

pub mod check;

pub use graph::{same_padding, Gradients, Graph, Var};
pub use params::{init_normal, init_orthogonal, init_uniform, Adam, AdamConfig, Bound, ParamStore};
pub use tensor::Tensor;
