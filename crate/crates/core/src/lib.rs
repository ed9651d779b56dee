//! Knowledge-enhanced question generation: triple extraction, a pointer-generator
//! QG model with relation-classification and tail-generation heads, iterative
//! training and corpus metrics.

pub mod bundled;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
