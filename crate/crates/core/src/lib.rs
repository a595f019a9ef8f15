// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod lst;
pub mod nmar;
pub mod numerics;
pub mod pe;
pub mod rng;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
