//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records each operation with its inputs and cached output.
//! Inputs are always earlier nodes, so [`Tape::backward`] is one reverse
//! sweep. Binary elementwise ops broadcast along unit dimensions, which covers
//! bias rows, per-sample columns, and scalars.
//!
//! ```
//! use qmlib::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::row(&[1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests;
