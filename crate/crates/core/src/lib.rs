//! Local-volatility linear model for commodity futures and swing option
//! pricing by regression and by policy optimization.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod error;
pub mod fixture;
pub mod interp;
pub mod lsmc;
pub mod lv_model;
pub mod market;
pub mod mc;
pub mod pde;
pub mod ppo;
pub mod rng;
pub mod spike;

pub use error::{Error, Result};
