//! Two modality-specific key-value memories joined by an associative
//! bridge. Source features address a key memory; the resulting addressing
//! reads a value memory trained to store target-modality features, so target
//! features can be recalled at inference time from the source alone.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
mod io;
pub mod memory;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
