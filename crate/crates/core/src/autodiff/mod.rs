//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradReport, ParamReport};
pub use kernels::conv_out_size;
pub use tape::{sigmoid, Attrs, OpKind, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
