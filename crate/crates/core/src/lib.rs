//! Action-aware 2D-to-3D human pose lifting.
//!
//! A spatial-temporal pose encoder and a text encoder are pretrained
//! together: pooled pose embeddings are aligned with embeddings of action
//! labels while the pose stream reconstructs 3D motion from corrupted 2D
//! input. Fine-tuning then adapts the pose encoder and regression head
//! alone.

pub mod cli;
pub mod config;
pub mod corruption;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
