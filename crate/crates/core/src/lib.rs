//! Iterative contrastive alignment for multimodal abstractive summarization.
//!
//! A dual-stream encoder aligns text fragments with image patches through
//! stacked recurrent alignment layers, each trained with an in-batch
//! contrastive objective, and a transformer decoder generates the summary
//! from the final text-side alignment features.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod ra_layer;
pub mod representation;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
