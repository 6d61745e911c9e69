//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! Binary elementwise ops broadcast over leading dimensions only: the shape
//! of one operand must be a suffix of the other's (a scalar has the empty
//! shape and broadcasts everywhere).

pub mod check;
mod kernels;
mod tape;
mod tensor;

pub use tape::{sigmoid, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
