// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggfrag;
pub mod bioagg;
pub mod column;
pub mod config;
pub mod discrete;
pub mod error;
pub mod fluid;
pub mod grid;
pub mod kernels;
pub mod oracle;
pub mod quadrature;
pub mod relaxation;
pub mod scenario;

pub use error::{FlocError, Result};
