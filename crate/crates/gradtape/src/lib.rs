//! Tape-based reverse-mode automatic differentiation over dense `f32`
//! tensors.
//!
//! Built for CPU-scale models where determinism and auditability matter more
//! than throughput: single-threaded, row-major storage, eager forward with a
//! recorded backward closure per op, GEMM delegated to `matrixmultiply`.
//!
//! A fresh [`Tape`] is created per training step; parameters live outside the
//! tape in a [`nn::ParamStore`] and enter a step via [`Tape::param`]. Frozen
//! parameters are recorded as constants, so gradients provably never reach
//! them.

mod conv;
mod losses;
mod ops;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
