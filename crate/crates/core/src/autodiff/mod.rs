//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{FlopCounter, FlopTag, Tape, Var};
pub use tensor::Tensor;
