//! Temporal knowledge graph forecasting that refines a frozen language
//! model's top-K next-entity candidates with trainable graph adapters.

pub mod adapters;
pub mod autodiff;
pub mod dist;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kg;
pub mod lm;
pub mod prompt;
pub mod retrieval;
pub mod rules;
pub mod synthetic;
pub mod train;

pub use dist::EntityDistribution;
pub use error::{Error, Result};
