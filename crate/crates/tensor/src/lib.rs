//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records primitives as they are evaluated; [`Graph::backward`]
//! replays them in reverse. The gradient reversal primitive is an identity in
//! the forward pass and scales the upstream gradient by `-lambda` on the way
//! back, which is what domain-adversarial training is built on.

mod clip;
mod error;
mod float;
mod graph;
pub mod kernels;
mod tensor;

pub use clip::clip_grad_norm;
pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use graph::{Gradients, Graph, Mode, Primitive, Var};
pub use tensor::{numel, Tensor};
