//! Facial action unit detection with landmark-driven attention and a
//! graph convolution over AU nodes.
//!
//! All layers are implemented in `f64` with explicit backward passes.

// NaN must fail validation, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod alignment;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod face;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod relation;
pub mod train;

pub use error::{Error, Result};
