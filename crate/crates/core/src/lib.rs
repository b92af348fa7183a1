//! Preference-guided policy optimization on sparse-reward tasks.
//!
//! Each iteration samples a batch with the current policy, improves it on
//! environment rewards with a clipped surrogate, then pulls it toward a small
//! ranked set of preferred trajectories by descending their kernel MMD
//! distance, and finally refreshes that set from the batch using pairwise
//! judgments.

pub mod annotator;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod export;
pub mod mmd;
pub mod net;
pub mod rundir;
pub mod trainer;
pub mod trajectory;

pub use config::{AnnotatorMode, TrainConfig};
pub use error::{Error, Result};
pub use trainer::{train, IterationMetrics, RunRecord, Trainer};
