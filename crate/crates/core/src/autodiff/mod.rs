//! Dense `f64` tensors with a reverse-mode tape and a finite-difference
//! gradient checker.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{Activation, CustomBackward, CustomForward, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
