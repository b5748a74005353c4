//! Universal Transformer Hawkes Process: a neural temporal point process
//! whose history encoder applies one shared self-attention layer a variable
//! number of times per position, with adaptive halting, a convolutional
//! feed-forward block and a recurrent postprocessing stage.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! 2-D `f64` tensors ([`autograd`]).

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod intensity;
pub mod model;
pub mod predict;
pub mod recurrence;
pub mod synthgen;
pub mod train;

pub use config::{LayerSharing, ModelConfig};
pub use data::{Dataset, Event, EventSequence};
pub use error::{Error, Result};
pub use model::Model;
