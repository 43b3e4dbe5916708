//! Zero-shot object counting: exemplar-based density counting driven by
//! class prototypes, nearest-neighbour patch selection and a learned
//! exemplar-error ranker.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod counter;
pub mod errpred;
pub mod error;
pub mod features;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pool;
pub mod prototype;
pub mod rng;
pub mod select;
pub mod synth;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
