//! Class-incremental learning with probabilistic adapters over frozen
//! vision-language features.
//!
//! A task-shared visual-guided attention block ([`vga`]) aligns class text
//! features with each image; per-task Gaussian adapters ([`adapters`]) turn the
//! aligned features into Monte-Carlo class embeddings; [`trainer`] drives the
//! incremental loop with replay ([`memory`]) and [`evaluation`] scores accuracy,
//! forgetting, calibration and novel-data detection.

pub mod adapters;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod feature_provider;
pub mod memory;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod rng;
pub mod trainer;
pub mod vga;

pub use error::{Error, Result};
