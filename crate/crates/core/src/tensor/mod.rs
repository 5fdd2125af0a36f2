//! Dense matrices, the deterministic generator and the finite-difference
//! gradient checker shared by every other module.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient};
pub use matrix::Matrix;
pub use rng::Rng;
