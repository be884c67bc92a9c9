//! Minimal reverse-mode differentiation over dense `f64` arrays.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use params::{Gradients, ParamId, ParamSet, Parameter};
pub use tape::{Tape, Var};
