//! Attention-shortcut language models.
//!
//! A decoder-only transformer whose last block replaces causal
//! self-attention with cross-attention over position-wise features of
//! intermediate layers, under a block-causal mask, next to the plain GPT
//! baseline. The crate also carries the data pipeline, the training and
//! evaluation loop, checkpoints, ablation and speed-up harnesses, and
//! attention-map export.

pub mod atlas;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod trainer;

pub use config::{ConfigIssue, ModelConfig, Recurrence, TapSelection};
pub use error::{Error, Result};
pub use model::{param_count, ForwardOptions, ForwardOutput, Model};
