#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod serve;
pub mod tensor;

pub use error::{Error, Result};
