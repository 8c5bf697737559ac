#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod link;
pub mod polarization;
pub mod security;
pub mod steering;

pub use error::{Error, Result};
