//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Graphs are rebuilt per forward pass: create a [`Tape`], register
//! parameters with [`Tape::param`], compose ops, then call
//! [`Tape::backward`] once on a scalar.
//!
//! Broadcasting in the elementwise ops follows right-aligned size-1
//! expansion (bias rows, scalars, keep-dim reductions). Any other shape
//! pairing is rejected with a dimension error.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{compare_with_differences, gradcheck, GradcheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    kernels::argmax(row).0
}
