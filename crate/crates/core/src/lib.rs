// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod baselines;
pub mod decoder;
pub mod encoders;
pub mod ensemble;
pub mod error;
pub mod eval;
mod regression;
pub mod seed;
pub mod simulator;
pub mod statespace;

pub use error::{Error, Result};
pub mod offline;
pub mod verify;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
