//! Pruning channels whose batch-norm running variance has collapsed,
//! folding batch norm, and quantization-aware fine-tuning for small
//! convolutional networks.

// `!(x > 0.0)` also rejects NaN; index loops mirror the tensor layout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bn;
pub mod data;
pub mod error;
pub mod exec;
pub mod graph;
pub mod models;
pub mod pfq;
pub mod quant;
pub mod tensor;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
