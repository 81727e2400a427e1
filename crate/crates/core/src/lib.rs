//! Generative and discriminative LSTM text classifiers, count-based
//! generative baselines, and the experiment protocols that compare them.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod lstm;
pub mod manifest;
pub mod models;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
