//! Lifelong question answering with hierarchical prompts routed by learned
//! key vectors, replay memory and open-world task detection.

pub mod adb;
pub mod backbone;
pub mod config;
pub mod error;
pub mod experiment;
pub mod keyspace;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod pool;
pub mod query;
pub mod seed;
pub mod taskgen;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
