//! Multi-token prediction transformers for path planning on graphs.
//!
//! The crate covers the whole pipeline: random DAGs and Blocksworld state
//! graphs, path datasets with degree-labelled test pairs, a small reverse-mode
//! autodiff engine, GPT-style backbones with multi-token heads, training,
//! autoregressive evaluation, the analytic two-token model with closed-form
//! gradients, and weight/attention analysis.

pub mod analysis;
pub mod autodiff;
pub mod blocksworld;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod simplified;
pub mod trainer;

pub use error::{Error, Result};
