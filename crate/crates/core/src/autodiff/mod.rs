//! Dense tensors with reverse-mode differentiation.

pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{BoundParams, ParamStore};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
