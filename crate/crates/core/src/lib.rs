//! Session-based transformer recommendation with optimized negative sampling.
//!
//! The crate covers the whole training and evaluation pipeline:
//!
//! * [`data`] parses clickstream logs, filters them to a support/length
//!   fixpoint, splits them temporally and assembles padded session batches.
//! * [`sampler`] draws uniform, frequency-proportional and in-batch negatives at
//!   elementwise, sessionwise or batchwise granularity and selects the top-k
//!   hardest negatives by score.
//! * [`model`] is a causal self-attention encoder with tied item embeddings.
//! * [`loss`] implements BCE, BPR-max and sampled softmax.
//! * [`train`] runs the epoch loop with Adam, checkpoints and timing.
//! * [`eval`] ranks the full catalog for every test transition.
//!
//! Everything numeric runs in `f64` on the CPU through the small autodiff
//! engine in [`tensor`]. Data-parallel loops go through [`par`], which uses
//! rayon when the `parallel` feature is enabled.

pub(crate) mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
