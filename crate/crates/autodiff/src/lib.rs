//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! The op set is exactly what a small inception-style regressor needs:
//! 2-D convolution with rectangular kernels, pooling, dense layers,
//! pointwise activations, channel concatenation and two losses. A
//! [`Graph`] records one forward pass; [`ParamStore`] owns the weights
//! and their Adam state between passes.

mod error;
pub mod gradcheck;
mod graph;
mod init;
mod kernels;
mod optim;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Conv2dOptions, Graph, Var, COSINE_CLAMP};
pub use init::he_normal;
pub use optim::{AdamConfig, Bound, Param, ParamId, ParamStore};
pub use tensor::Tensor;
