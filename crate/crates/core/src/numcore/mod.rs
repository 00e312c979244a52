//! Dense `f64` tensors, a reverse-mode computation record, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{dropout_mask, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::{adaptive_bin, sigmoid};
