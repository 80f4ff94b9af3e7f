//! Reward modelling with eye-tracking features.
//!
//! Pairs of responses are scored by a small causal transformer whose input
//! can be augmented with per-token gaze features, either as a separate block
//! of embeddings placed before the text or added onto the text embeddings.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod gazegen;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod remap;
pub mod rmcore;
pub mod synthetic;
pub mod tokenizers;
pub mod trainer;

pub use error::{Error, Result};
