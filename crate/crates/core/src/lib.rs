// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod fbp;
pub mod forward;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod io;
pub mod metrics;
pub mod phantoms;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};
