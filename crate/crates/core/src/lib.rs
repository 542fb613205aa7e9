#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod data;
pub mod error;
pub mod features;
pub mod gate;
pub mod gradcheck;
pub mod intervene;
pub mod model;
pub mod rng;
pub mod spectrum;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
