//! Dense `f32` tensors, a Wengert-tape autodiff graph and an AdamW optimizer.
//!
//! Everything is single-threaded and deterministic: identical inputs and seeds
//! produce bit-identical outputs. Values are checked for finiteness after every
//! forward op so a diverging run fails at the op that produced the NaN.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{GradMap, ParameterTree};
pub use tensor::Tensor;

#[cfg(feature = "fast-alloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
