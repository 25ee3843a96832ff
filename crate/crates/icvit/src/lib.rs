//! Training framework for multi-channel imaging with isolated-channel
//! vision transformers.
//!
//! The crate covers the full desk-scale workflow: synthetic multi-channel
//! dataset generation, single-channel self-distillation pretraining,
//! multi-channel supervised fine-tuning, and the analysis instruments
//! (channel-subset sweeps, inter-channel correlation, attention maps,
//! sampling-strategy cost benchmarks) that go with it.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dino;
pub mod error;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
