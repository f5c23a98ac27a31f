//! Multi-task misinformation classification.
//!
//! One shared Transformer encoder feeds a registry of per-task MLP heads.
//! Training runs in two stages: joint optimization over all tasks with
//! balanced oversampling, then per-task fine-tuning. The evaluation module
//! implements task-combination ablations, few-shot adaptation to unseen tasks
//! and leave-one-event-out cross-validation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod multitask;
pub mod par;
pub mod params;
pub mod seed;
pub mod tokenization;
pub mod training;

pub use error::{Error, Result};
