//! Dense tensors and a reverse-mode gradient tape.
//!
//! Ops are methods on [`Tape`]; each records its inputs and whatever it needs
//! for the backward rule. Tapes are single-threaded; distinct tapes are
//! independent.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use real::{DType, Real};
#[cfg(test)]
pub(crate) use tape::softmax_inplace;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
