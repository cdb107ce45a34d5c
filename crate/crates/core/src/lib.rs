//! Landscape-of-thoughts toolkit.
//!
//! Samples chain-of-thought trajectories for multiple-choice questions, maps
//! every intermediate state to a perplexity-distance feature over the answer
//! choices, projects the pooled features to 2D density landscapes, computes
//! per-state reasoning metrics and trains a forest verifier that reweights
//! majority voting.

pub mod dataset;
pub mod error;
pub mod features;
pub mod landscape;
pub mod model_client;
pub mod parallel;
pub mod stats;
pub mod synthetic;
pub mod trajectory;
pub mod verifier;

pub use error::{Error, Result};
