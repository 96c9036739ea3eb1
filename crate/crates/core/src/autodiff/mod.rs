//! Tape-based reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`] then
//! walks the records in reverse and returns gradients for every leaf that was
//! created with `requires_grad`. All reductions run in a fixed sequential order,
//! so both passes are bit-reproducible for identical inputs.
//!
//! ```
//! use affiner::autodiff::Tape;
//! use affiner::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let a = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
//! let x = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
//! let loss = a.mul(x)?.sum()?;
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
//! # Ok::<(), affiner::Error>(())
//! ```

mod grad_check;
pub(crate) mod kernels;
mod tape;

pub use grad_check::{grad_check, GradCheckReport};
pub use tape::{Grads, Tape, Var};
