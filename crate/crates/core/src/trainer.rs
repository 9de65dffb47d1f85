//! Sequential task training, task-conditioned inference, and full runs.
//!
//! Incremental runs train one shared network task by task: each task opens a
//! rank increment (freezing everything older), runs `epochs x batches` of
//! Adam on exactly the task's trainable set, then every task seen so far is
//! re-evaluated to fill one row of the accuracy matrix. Because old
//! parameters are structurally untouched and task datasets regenerate
//! bit-identically, `a[t][j] == a[j][j]` exactly — zero forgetting is an
//! invariant here, not an aspiration, and the tests assert it on bits.
//!
//! Parallel runs are the non-continual baseline: an independent fresh
//! network per task (at a given rank, or full rank), same evaluation
//! protocol.
//!
//! All randomness is keyed by `derive_seed(seed, tag, task, ...)`, never by
//! one sequential stream, so a run resumed from a checkpoint consumes the
//! same draws as an uninterrupted one.

use std::time::Instant;

use crate::data::{batches, TaskDataset, TaskStream};
use crate::error::{ItlError, Result};
use crate::linalg::{derive_seed, Matrix};
use crate::metrics::AccuracyMatrix;
use crate::network::MultiHeadNet;
use crate::optim::{AdamConfig, AdamState};

/// Evaluation batch size; results are per-sample and do not depend on it.
const EVAL_CHUNK: usize = 512;

/// Per-task training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub rank_first: usize,
    pub rank_increment: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 5,
            batch_size: 128,
            adam: AdamConfig::default(),
            rank_first: 11,
            rank_increment: 1,
            seed: 42,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(ItlError::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(ItlError::invalid("batch_size", "must be >= 1"));
        }
        if self.rank_first < 1 || self.rank_increment < 1 {
            return Err(ItlError::invalid("rank", "ranks must be >= 1"));
        }
        self.adam.validate()
    }
}

/// Incremental training of one shared net, or independent per-task nets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Incremental,
    /// Fresh net per task with this first-task rank.
    ParallelRank(usize),
    /// Fresh net per task at full rank (`min(in, out)` per layer).
    ParallelFullRank,
}

impl RunMode {
    pub fn as_str(&self) -> String {
        match self {
            RunMode::Incremental => "incremental".into(),
            RunMode::ParallelRank(r) => format!("parallel:{r}"),
            RunMode::ParallelFullRank => "parallel:full".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "incremental" => Ok(RunMode::Incremental),
            "parallel:full" => Ok(RunMode::ParallelFullRank),
            other => {
                if let Some(r) = other.strip_prefix("parallel:") {
                    let rank: usize = r.parse().map_err(|_| {
                        ItlError::invalid("mode", format!("bad parallel rank `{r}`"))
                    })?;
                    Ok(RunMode::ParallelRank(rank))
                } else {
                    Err(ItlError::invalid(
                        "mode",
                        format!("unknown mode `{other}` (incremental|parallel:N|parallel:full)"),
                    ))
                }
            }
        }
    }
}

/// Loss/accuracy trace for one trained task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLog {
    pub task: usize,
    pub epoch_mean_loss: Vec<f64>,
    pub final_train_accuracy: f64,
    pub steps: usize,
}

/// Everything a run produces besides the network itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: RunMode,
    pub matrix: AccuracyMatrix,
    pub wall_secs: Vec<f64>,
    pub params_after_task: Vec<u64>,
    pub task_logs: Vec<TaskLog>,
}

impl RunRecord {
    pub fn new(mode: RunMode) -> Self {
        RunRecord {
            mode,
            matrix: AccuracyMatrix::new(),
            wall_secs: Vec::new(),
            params_after_task: Vec::new(),
            task_logs: Vec::new(),
        }
    }

    pub fn tasks_done(&self) -> usize {
        self.matrix.num_stages()
    }
}

/// Train the next task (`net.num_tasks() + 1`) on its dataset: open the rank
/// increment, then `epochs x batches` of forward/backward/Adam touching only
/// the new task's trainable set. Aborts with a diagnostic if the loss goes
/// non-finite.
pub fn train_task(net: &mut MultiHeadNet, ds: &TaskDataset, hyper: &TrainHyper) -> Result<TaskLog> {
    hyper.validate()?;
    let t = net.num_tasks() + 1;
    if ds.task_id != t {
        return Err(ItlError::TaskOrder {
            expected: t,
            got: ds.task_id,
        });
    }
    if ds.is_empty() {
        return Err(ItlError::invalid("dataset", "empty training set"));
    }
    net.add_task(ds.num_classes, hyper.rank_increment, hyper.seed)?;

    let lens = net.trainable_block_lens(t)?;
    let mut adam = AdamState::new(&lens, hyper.adam)?;

    let mut log = TaskLog {
        task: t,
        epoch_mean_loss: Vec::with_capacity(hyper.epochs),
        final_train_accuracy: 0.0,
        steps: 0,
    };
    for epoch in 1..=hyper.epochs {
        let epoch_seed = derive_seed(hyper.seed, "shuffle", t as u64, epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in batches(ds, hyper.batch_size, epoch_seed) {
            let (x, y) = ds.gather(&batch);
            let (report, grads) = net.loss_and_backward(&x, &y, t)?;
            if !report.mean_loss.is_finite() {
                return Err(ItlError::NonFinite {
                    context: format!(
                        "training loss at task {t}, epoch {epoch}, step {}",
                        log.steps + 1
                    ),
                });
            }
            let mut params = net.trainable_blocks_mut(t)?;
            adam.step(&mut params, &grads.blocks())?;
            loss_sum += report.mean_loss * report.batch_size as f64;
            correct += report.correct;
            seen += report.batch_size;
            log.steps += 1;
        }
        log.epoch_mean_loss.push(loss_sum / seen as f64);
        log.final_train_accuracy = correct as f64 / seen as f64;
    }
    Ok(log)
}

/// Predicted class for a single input, task identity known. Ties break to
/// the lowest class index.
pub fn infer(net: &MultiHeadNet, input: &[f64], t: usize) -> Result<usize> {
    let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
    Ok(net.infer_batch(&x, t)?[0])
}

/// Fraction of correct predictions over a test set. Deterministic: chunking
/// never mixes samples, so the result is independent of `EVAL_CHUNK`.
pub fn evaluate(net: &MultiHeadNet, ds: &TaskDataset, t: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(ItlError::invalid("dataset", "empty test set"));
    }
    let mut correct = 0usize;
    let indices: Vec<u32> = (0..ds.len() as u32).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let preds = net.infer_batch(&x, t)?;
        correct += preds.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Run a full task sequence from scratch. `on_task` is called after every
/// trained task with the task's network and the record so far (checkpointing
/// hook); pass a no-op closure if not needed.
pub fn run_sequence(
    stream: &TaskStream,
    hidden_dims: &[usize],
    hyper: &TrainHyper,
    mode: RunMode,
    on_task: &mut dyn FnMut(&MultiHeadNet, &RunRecord) -> Result<()>,
) -> Result<(RunRecord, MultiHeadNet)> {
    resume_sequence(stream, hidden_dims, hyper, mode, None, on_task)
}

/// Continue a run from a previous state (the network after `record.tasks_done()`
/// tasks plus the record itself), or start fresh when `state` is `None`.
/// Because every random draw is keyed to (seed, task, epoch), the resumed run
/// reproduces the uninterrupted one bit for bit.
pub fn resume_sequence(
    stream: &TaskStream,
    hidden_dims: &[usize],
    hyper: &TrainHyper,
    mode: RunMode,
    state: Option<(MultiHeadNet, RunRecord)>,
    on_task: &mut dyn FnMut(&MultiHeadNet, &RunRecord) -> Result<()>,
) -> Result<(RunRecord, MultiHeadNet)> {
    hyper.validate()?;
    if stream.num_tasks() == 0 {
        return Err(ItlError::invalid("stream", "no tasks"));
    }
    match mode {
        RunMode::Incremental => run_incremental(stream, hidden_dims, hyper, state, on_task),
        RunMode::ParallelRank(_) | RunMode::ParallelFullRank => {
            run_parallel(stream, hidden_dims, hyper, mode, state, on_task)
        }
    }
}

fn run_incremental(
    stream: &TaskStream,
    hidden_dims: &[usize],
    hyper: &TrainHyper,
    state: Option<(MultiHeadNet, RunRecord)>,
    on_task: &mut dyn FnMut(&MultiHeadNet, &RunRecord) -> Result<()>,
) -> Result<(RunRecord, MultiHeadNet)> {
    let (mut net, mut record) = match state {
        Some((net, record)) => {
            if net.num_tasks() != record.tasks_done() {
                return Err(ItlError::Checkpoint(format!(
                    "network has {} tasks but record has {} rows",
                    net.num_tasks(),
                    record.tasks_done()
                )));
            }
            (net, record)
        }
        None => (
            MultiHeadNet::build_mlp(stream.input_dim(), hidden_dims, hyper.rank_first, hyper.seed)?,
            RunRecord::new(RunMode::Incremental),
        ),
    };

    for t in record.tasks_done() + 1..=stream.num_tasks() {
        let started = Instant::now();
        let train = stream.train_task(t)?;
        let log = train_task(&mut net, &train, hyper)?;
        let mut row = Vec::with_capacity(t);
        for j in 1..=t {
            let test = stream.test_task(j)?;
            row.push(evaluate(&net, &test, j)?);
        }
        record.matrix.push_row(row)?;
        record.params_after_task.push(net.param_count());
        record.wall_secs.push(started.elapsed().as_secs_f64());
        record.task_logs.push(log);
        on_task(&net, &record)?;
    }
    Ok((record, net))
}

fn run_parallel(
    stream: &TaskStream,
    hidden_dims: &[usize],
    hyper: &TrainHyper,
    mode: RunMode,
    state: Option<(MultiHeadNet, RunRecord)>,
    on_task: &mut dyn FnMut(&MultiHeadNet, &RunRecord) -> Result<()>,
) -> Result<(RunRecord, MultiHeadNet)> {
    let mut record = match state {
        Some((_, record)) => record,
        None => RunRecord::new(mode),
    };
    let mut last_net = None;

    for t in record.tasks_done() + 1..=stream.num_tasks() {
        let started = Instant::now();
        // Every task gets its own network and its own derived seed.
        let task_seed = derive_seed(hyper.seed, "parallel-net", t as u64, 0);
        let task_hyper = TrainHyper {
            seed: task_seed,
            ..hyper.clone()
        };
        let ranks: Vec<usize> = match mode {
            RunMode::ParallelRank(r) => vec![r; hidden_dims.len()],
            RunMode::ParallelFullRank => {
                let mut dims = Vec::with_capacity(hidden_dims.len());
                let mut prev = stream.input_dim();
                for &h in hidden_dims {
                    dims.push(prev.min(h));
                    prev = h;
                }
                dims
            }
            RunMode::Incremental => unreachable!(),
        };
        let mut net =
            MultiHeadNet::build_mlp_with_ranks(stream.input_dim(), hidden_dims, &ranks, task_seed)?;

        // The per-task net sees this as its first (and only) task.
        let mut train = stream.train_task(t)?;
        train.task_id = 1;
        let log = train_task(&mut net, &train, &task_hyper)?;

        // Earlier nets are untouched by later training, so their accuracies
        // carry over unchanged; only the new diagonal entry needs computing.
        let mut row = match record.matrix.row(t - 1) {
            Some(prev) => prev.to_vec(),
            None => Vec::new(),
        };
        let test = stream.test_task(t)?;
        row.push(evaluate(&net, &test, 1)?);
        record.matrix.push_row(row)?;

        let prev_params = record.params_after_task.last().copied().unwrap_or(0);
        record.params_after_task.push(prev_params + net.param_count());
        record.wall_secs.push(started.elapsed().as_secs_f64());
        record.task_logs.push(TaskLog { task: t, ..log });
        on_task(&net, &record)?;
        last_net = Some(net);
    }

    let net = last_net.ok_or_else(|| {
        ItlError::invalid("resume", "parallel resume with no remaining tasks")
    })?;
    Ok((record, net))
}
