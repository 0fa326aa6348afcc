//! Dense `f64` tensors and a define-by-run gradient tape.

mod gemm;
mod tape;
mod tensor;

#[cfg(test)]
pub(crate) mod gradcheck;
#[cfg(test)]
mod tests;

pub(crate) use gemm::{gemm, Layout};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
