//! Causal learning for multi-behavior recommendation.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical
//! piece of the pipeline: interaction corpora and bias proxies, the discrete
//! structural-causal-model oracle, a confounded data generator, embedding
//! backbones, debiased scoring, dual-path aggregation, bias-aware contrastive
//! losses, training with exact gradients, and full-ranking evaluation.
//!
//! File formats, configuration and the command-line surface live in the
//! `mclmr` companion crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod causal;
pub mod contrast;
pub mod corpus;
mod error;
pub mod eval;
pub mod fusion;
pub mod math;
pub mod model;
pub mod params;
pub mod scm;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
