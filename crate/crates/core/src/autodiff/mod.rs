//! Dense f64 tensors with a define-by-run reverse-mode tape.
//!
//! A fresh [`Tape`] is built for every forward pass. Parameters enter the tape
//! as leaves with `requires_grad`; after [`Tape::backward`] their gradients are
//! read back with [`Var::grad`].

mod tape;
mod tensor;

pub use tape::{Tape, Var, MIN_ROW_NORM};
pub(crate) use tape::column_norms;
pub use tensor::Tensor;
