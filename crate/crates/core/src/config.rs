//! Experiment configuration: one JSON document.
//!
//! Example:
//!
//! ```json
//! {
//!   "stream": { "kind": "permuted", "tasks": 20, "seed": 1, "data_dir": "data/mnist" },
//!   "arch": { "input_dim": 784, "hidden_dims": [256, 256] },
//!   "rank": { "first": 11, "increment": 1 },
//!   "mode": "incremental",
//!   "optim": { "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 },
//!   "train": { "epochs": 5, "batch_size": 128 },
//!   "seed": 42,
//!   "output_dir": "runs/pmnist-11-1"
//! }
//! ```
//!
//! Every section except `stream` and `output_dir` has defaults. `mode` is
//! `"incremental"`, `"parallel:<rank>"`, or `"parallel:full"`. The MNIST
//! data directory resolves from `stream.data_dir`, then the `ITL_DATA_DIR`
//! environment variable, then `data/mnist`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::RunMeta;
use crate::data::{load_mnist_dir, Split, StreamKind, TaskStream};
use crate::error::{ItlError, Result};
use crate::optim::AdamConfig;
use crate::trainer::{RunMode, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub kind: String,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_stream_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Split streams only.
    #[serde(default)]
    pub classes_per_task: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    #[serde(default = "default_rank_first")]
    pub first: usize,
    #[serde(default = "default_rank_increment")]
    pub increment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn default_tasks() -> usize {
    20
}
fn default_stream_seed() -> u64 {
    1
}
fn default_input_dim() -> usize {
    784
}
fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_rank_first() -> usize {
    11
}
fn default_rank_increment() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    128
}
fn default_mode() -> String {
    "incremental".into()
}
fn default_seed() -> u64 {
    42
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: default_input_dim(),
            hidden_dims: default_hidden(),
        }
    }
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            first: default_rank_first(),
            increment: default_rank_increment(),
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ItlError::io(path.display().to_string(), e))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| ItlError::Config {
            field: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(config)
    }

    /// Field-by-field validation with the offending field named.
    pub fn validate(&self) -> Result<()> {
        let kind = self.stream_kind()?;
        if self.stream.tasks < 1 {
            return Err(config_err("stream.tasks", "must be >= 1"));
        }
        if kind == StreamKind::Split {
            match self.stream.classes_per_task {
                None => {
                    return Err(config_err(
                        "stream.classes_per_task",
                        "required for split streams",
                    ))
                }
                Some(c) if c < 2 => {
                    return Err(config_err("stream.classes_per_task", "must be >= 2"))
                }
                _ => {}
            }
        }
        if self.arch.input_dim == 0 {
            return Err(config_err("arch.input_dim", "must be >= 1"));
        }
        if self.arch.hidden_dims.is_empty() || self.arch.hidden_dims.contains(&0) {
            return Err(config_err("arch.hidden_dims", "must be non-empty and positive"));
        }
        if self.rank.first < 1 {
            return Err(config_err("rank.first", "must be >= 1"));
        }
        if self.rank.increment < 1 {
            return Err(config_err("rank.increment", "must be >= 1"));
        }
        if self.train.epochs < 1 {
            return Err(config_err("train.epochs", "must be >= 1"));
        }
        if self.train.batch_size < 1 {
            return Err(config_err("train.batch_size", "must be >= 1"));
        }
        self.mode()?;
        self.adam()
            .validate()
            .map_err(|e| config_err("optim", &e.to_string()))?;
        Ok(())
    }

    pub fn stream_kind(&self) -> Result<StreamKind> {
        StreamKind::parse(&self.stream.kind)
            .map_err(|e| config_err("stream.kind", &e.to_string()))
    }

    pub fn mode(&self) -> Result<RunMode> {
        RunMode::parse(&self.mode).map_err(|e| config_err("mode", &e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: self.adam(),
            rank_first: self.rank.first,
            rank_increment: self.rank.increment,
            seed: self.seed,
        }
    }

    /// `stream.data_dir`, else `$ITL_DATA_DIR`, else `data/mnist`.
    pub fn data_dir(&self) -> PathBuf {
        if let Some(dir) = &self.stream.data_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var("ITL_DATA_DIR") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("data/mnist")
    }

    /// Load the base data and build the task stream.
    pub fn load_stream(&self) -> Result<TaskStream> {
        let dir = self.data_dir();
        let train = load_mnist_dir(&dir, Split::Train)?;
        let test = load_mnist_dir(&dir, Split::Test)?;
        match self.stream_kind()? {
            StreamKind::Permuted => {
                TaskStream::permuted(train, test, self.stream.tasks, self.stream.seed)
            }
            StreamKind::Rotated => {
                TaskStream::rotated(train, test, self.stream.tasks, self.stream.seed)
            }
            StreamKind::Split => {
                let cpt = self.stream.classes_per_task.ok_or_else(|| {
                    config_err("stream.classes_per_task", "required for split streams")
                })?;
                TaskStream::split(train, test, cpt, self.stream.seed)
            }
        }
    }

    /// Checkpoint metadata for this config at the given progress.
    pub fn run_meta(&self, tasks_done: usize) -> RunMeta {
        RunMeta {
            version: 1,
            mode: self.mode.clone(),
            stream_kind: self.stream.kind.clone(),
            stream_seed: self.stream.seed,
            stream_tasks: self.stream.tasks,
            classes_per_task: self.stream.classes_per_task,
            global_seed: self.seed,
            rank_first: self.rank.first,
            rank_increment: self.rank.increment,
            input_dim: self.arch.input_dim,
            hidden_dims: self.arch.hidden_dims.clone(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            tasks_done,
        }
    }
}

fn config_err(field: &str, detail: &str) -> ItlError {
    ItlError::Config {
        field: field.to_string(),
        detail: detail.to_string(),
    }
}
