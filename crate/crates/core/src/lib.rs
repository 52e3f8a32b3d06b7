//! Semi-supervised training of linear classification heads over frozen
//! feature embeddings.
//!
//! The engine implements a balanced-margin, decoupled-label-smoothing
//! objective alongside classic threshold-based pseudo-labeling baselines.
//! Everything is deterministic given a seed: all randomness flows through
//! [`numkit::RandomStream`] and all reductions run in a fixed order.

pub mod config;
pub mod embedstore;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod objective;
pub mod pace;
pub mod strategy;
pub mod trainer;

pub use error::{Error, Result};
