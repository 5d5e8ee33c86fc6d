//! Dense `f64` tensors, a define-by-run autodiff tape and the Adam optimizer.

mod adam;
mod gemm;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{conv_out_extent, gelu_scalar};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
