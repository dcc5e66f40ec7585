//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, sample_coords, GradCheckReport};
pub use tape::{
    Conv2dGeometry, CustomOp, ElementwiseOp, Gradients, OpKind, ReduceOp, Tape, Var,
};
pub use tensor::Tensor;
