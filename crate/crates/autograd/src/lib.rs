//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations needed by small convolutional encoders and U-Nets
//! are provided. All ops are generic over [`Scalar`] so the same model code
//! runs in `f32` for training and in `f64` for finite-difference checks.

mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{clip_global_norm, Sgd};
pub use params::{Bound, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
