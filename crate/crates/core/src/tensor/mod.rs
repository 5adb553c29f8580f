//! Dense `f64` tensors and a reverse-mode differentiation tape.

mod dense;
mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
