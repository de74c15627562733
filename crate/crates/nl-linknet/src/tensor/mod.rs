//! Dense rank-4 tensors, compute kernels and tape-based reverse-mode
//! autodiff.

mod data;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod shape;
mod tape;
pub mod transform;

pub use data::{finite_checks_enabled, set_finite_checks, Tensor};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use scalar::Scalar;
pub use shape::{ConvSpec, PoolSpec, Shape};
pub use tape::{Tape, Var};
