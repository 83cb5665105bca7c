//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations in insertion order; [`Tape::backward`]
//! walks it in reverse from a scalar root. Only operations with at least one
//! gradient-requiring input keep their backward information.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
