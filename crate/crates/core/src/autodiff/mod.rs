//! Reverse-mode automatic differentiation over dense f64 tensors.

pub mod gradcheck;
pub mod special;
mod tape;
mod tensor;

pub use tape::{concat_last, stack_axis1, Param, ParamSet, Tape};
pub use tensor::{Mask, Tensor};
