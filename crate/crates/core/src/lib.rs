//! Core library for generative tabular learning: table loading, context
//! sampling, prompt rendering, tokenization, the masked training objective,
//! a small decoder-only transformer, training, evaluation and a synthetic
//! benchmark generator.

pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;
pub mod sampler;
pub mod synthbench;
pub mod tabular;
pub mod templating;
pub mod tokenization;
pub mod trainer;

pub use error::{Error, Result};
