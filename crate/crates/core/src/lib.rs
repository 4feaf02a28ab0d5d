// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod desk;
pub mod error;
pub mod expcli;
pub mod fidelity;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod restore;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
