//! Incremental task learning with low-rank factor increments.
//!
//! One multi-head MLP is trained over a sequence of classification tasks.
//! Each hidden layer stores its weight as a sum of low-rank factor pairs:
//! task `t` adds a fresh pair, freezes everything older, and learns per-task
//! selector weights that rescale the frozen pairs. Old tasks are served by
//! their own frozen selectors and output heads, so earlier predictions never
//! change: forgetting is exactly zero by construction.
//!
//! The crate ships the training engine plus an experiment harness for the
//! classic MNIST task streams (permuted, rotated, split), accuracy/forgetting
//! metrics, parameter counting, checkpointing, and a CLI (`itl`).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod report;
pub mod trainer;

pub use error::{ItlError, Result};
