//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Sums are always accumulated left to right, so forward values are bitwise
//! reproducible for identical inputs.

mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{log_sigmoid, sigmoid, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Tensor, NORM_EPS};
