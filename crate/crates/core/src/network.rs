//! Multi-head MLP over factorized hidden layers.
//!
//! The trunk is a stack of [`FactorizedLayer`]s with ReLU activations; each
//! task owns a dense output head (heads are full-rank on purpose: they are
//! small, and every task gets an independent one). The loss is softmax
//! cross-entropy with a log-sum-exp stabilizer.
//!
//! Trainable blocks for task `t` are ordered canonically as
//! `[layer 1: U_t, V_t, s_{1,t}..s_{t,t}, bias_t] ... [layer K: ...],
//! head_t weight, head_t bias`. Gradients, Adam state, and the finite
//! difference checker all use this order.

use crate::error::{ItlError, Result};
use crate::layer::{FactorizedLayer, LayerCache, LayerGrads};
use crate::linalg::{derive_seed, matmul, orthogonal_init, Matrix, SeededRng};

/// Dense per-task output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    weight: Matrix,
    bias: Vec<f64>,
}

impl Head {
    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(ItlError::shape(
                "head",
                format!("weight rows {} != bias len {}", weight.rows(), bias.len()),
            ));
        }
        Ok(Head { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, h: &Matrix) -> Result<Matrix> {
        let mut logits = matmul(h, &self.weight.transpose())?;
        for i in 0..logits.rows() {
            for (v, b) in logits.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(logits)
    }
}

/// Loss and accuracy summary for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub mean_loss: f64,
    pub correct: usize,
    pub batch_size: usize,
}

/// Gradients for every trainable parameter of one task.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub layers: Vec<LayerGrads>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

impl NetGradients {
    /// Flatten into the canonical block order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut blocks = Vec::new();
        for lg in &self.layers {
            blocks.extend(lg.blocks());
        }
        blocks.push(self.head_weight.data());
        blocks.push(&self.head_bias);
        blocks
    }
}

/// Intermediates from a training forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    layer_caches: Vec<LayerCache>,
    /// Pre-activation output of each hidden layer.
    preacts: Vec<Matrix>,
    /// Input to the head (last hidden activation).
    head_input: Matrix,
}

/// One shared factorized trunk plus one dense head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadNet {
    input_dim: usize,
    hidden_layers: Vec<FactorizedLayer>,
    heads: Vec<Head>,
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

impl MultiHeadNet {
    /// Build the trunk: one factorized layer per hidden dim, each with its
    /// own first-task factor pair of rank `r1`. No heads yet; the first
    /// [`Self::add_task`] call attaches the task-1 head to these factors.
    pub fn build_mlp(input_dim: usize, hidden_dims: &[usize], r1: usize, seed: u64) -> Result<Self> {
        Self::build_mlp_with_ranks(input_dim, hidden_dims, &vec![r1; hidden_dims.len()], seed)
    }

    /// Same as [`Self::build_mlp`] with an explicit first-task rank per layer
    /// (used for the full-rank parallel baseline).
    pub fn build_mlp_with_ranks(
        input_dim: usize,
        hidden_dims: &[usize],
        ranks: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if hidden_dims.is_empty() {
            return Err(ItlError::invalid("hidden_dims", "must be non-empty"));
        }
        if input_dim == 0 {
            return Err(ItlError::invalid("input_dim", "must be positive"));
        }
        if ranks.len() != hidden_dims.len() {
            return Err(ItlError::invalid("ranks", "one rank per hidden layer"));
        }
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut in_dim = input_dim;
        for (k, (&out_dim, &r)) in hidden_dims.iter().zip(ranks).enumerate() {
            let mut rng = SeededRng::new(derive_seed(seed, "factor-init", 1, k as u64 + 1));
            layers.push(FactorizedLayer::new(in_dim, out_dim, r, &mut rng)?);
            in_dim = out_dim;
        }
        Ok(MultiHeadNet {
            input_dim,
            hidden_layers: layers,
            heads: Vec::new(),
        })
    }

    /// Open task `t = num_tasks() + 1`: for `t > 1` every hidden layer gets a
    /// frozen-past rank-`r_t` increment; a fresh orthogonally initialized
    /// dense head is appended either way. Previous heads are untouched.
    pub fn add_task(&mut self, num_classes: usize, r_t: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(ItlError::invalid(
                "num_classes",
                format!("need at least 2 classes, got {num_classes}"),
            ));
        }
        let t = self.heads.len() + 1;
        if t > 1 {
            for (k, layer) in self.hidden_layers.iter_mut().enumerate() {
                let mut rng = SeededRng::new(derive_seed(seed, "factor-init", t as u64, k as u64 + 1));
                layer.add_task(r_t, &mut rng)?;
            }
        }
        let hidden = self.last_hidden_dim();
        let mut rng = SeededRng::new(derive_seed(seed, "head-init", t as u64, 0));
        // Orthogonal rows when the head is wide (the usual case), orthogonal
        // columns otherwise.
        let weight = if num_classes <= hidden {
            orthogonal_init(hidden, num_classes, &mut rng)?.transpose()
        } else {
            orthogonal_init(num_classes, hidden, &mut rng)?
        };
        self.heads.push(Head {
            weight,
            bias: vec![0.0; num_classes],
        });
        Ok(())
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_layers: Vec<FactorizedLayer>,
        heads: Vec<Head>,
    ) -> Result<Self> {
        if hidden_layers.is_empty() {
            return Err(ItlError::Checkpoint("network has no hidden layers".into()));
        }
        let mut in_dim = input_dim;
        for (k, layer) in hidden_layers.iter().enumerate() {
            if layer.in_dim() != in_dim {
                return Err(ItlError::Checkpoint(format!(
                    "layer {k} expects input {} but gets {in_dim}",
                    layer.in_dim()
                )));
            }
            in_dim = layer.out_dim();
        }
        let t = heads.len();
        if hidden_layers.iter().any(|l| l.num_tasks() != t.max(1)) {
            return Err(ItlError::Checkpoint(
                "hidden layers and heads disagree on task count".into(),
            ));
        }
        if heads.iter().any(|h| h.weight.cols() != in_dim) {
            return Err(ItlError::Checkpoint("head width mismatch".into()));
        }
        Ok(MultiHeadNet {
            input_dim,
            hidden_layers,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_layers(&self) -> &[FactorizedLayer] {
        &self.hidden_layers
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn last_hidden_dim(&self) -> usize {
        self.hidden_layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn num_classes(&self, t: usize) -> Option<usize> {
        self.heads.get(t.checked_sub(1)?).map(Head::num_classes)
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.heads.len() {
            return Err(ItlError::UnknownTask {
                task: t,
                detail: format!("network has {} heads", self.heads.len()),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(ItlError::shape(
                "net forward",
                format!("input width {} != {}", x.cols(), self.input_dim),
            ));
        }
        Ok(())
    }

    /// Logits for task `t` (evaluation path, no caches).
    pub fn forward(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        self.check_task(t)?;
        self.check_input(x)?;
        let mut h = relu(&self.hidden_layers[0].forward(x, t)?);
        for layer in &self.hidden_layers[1..] {
            h = relu(&layer.forward(&h, t)?);
        }
        self.heads[t - 1].forward(&h)
    }

    /// Logits plus the caches needed for a backward pass.
    pub fn forward_train(&self, x: &Matrix, t: usize) -> Result<(Matrix, NetCache)> {
        self.check_task(t)?;
        self.check_input(x)?;
        let mut layer_caches = Vec::with_capacity(self.hidden_layers.len());
        let mut preacts = Vec::with_capacity(self.hidden_layers.len());
        let mut h = x.clone();
        for layer in &self.hidden_layers {
            let (a, cache) = layer.forward_train(&h, t)?;
            h = relu(&a);
            layer_caches.push(cache);
            preacts.push(a);
        }
        let logits = self.heads[t - 1].forward(&h)?;
        Ok((
            logits,
            NetCache {
                layer_caches,
                preacts,
                head_input: h,
            },
        ))
    }

    fn check_labels(&self, labels: &[usize], batch: usize, t: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(ItlError::shape(
                "loss",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        let classes = self.heads[t - 1].num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(ItlError::invalid(
                "labels",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy of the batch (no gradients).
    pub fn loss_only(&self, x: &Matrix, labels: &[usize], t: usize) -> Result<f64> {
        self.check_task(t)?;
        let logits = self.forward(x, t)?;
        self.check_labels(labels, logits.rows(), t)?;
        Ok(cross_entropy(&logits, labels).0)
    }

    /// Mean softmax cross-entropy plus gradients for exactly the trainable
    /// set of task `t`: `U_t`, `V_t`, task-`t` selectors and bias of every
    /// hidden layer, and head `t`. Nothing owned by another task appears in
    /// the result.
    pub fn loss_and_backward(
        &self,
        x: &Matrix,
        labels: &[usize],
        t: usize,
    ) -> Result<(LossReport, NetGradients)> {
        self.check_task(t)?;
        let (logits, cache) = self.forward_train(x, t)?;
        let batch = logits.rows();
        self.check_labels(labels, batch, t)?;

        let (mean_loss, probs) = cross_entropy(&logits, labels);
        let correct = count_correct(&logits, labels);

        // d(mean loss)/d(logits) = (softmax - onehot) / batch
        let mut dlogits = probs;
        let inv_b = 1.0 / batch as f64;
        for (b, &y) in labels.iter().enumerate() {
            let row = dlogits.row_mut(b);
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv_b;
            }
        }

        let head = &self.heads[t - 1];
        let head_weight_grad = matmul(&dlogits.transpose(), &cache.head_input)?;
        let mut head_bias_grad = vec![0.0; head.num_classes()];
        for b in 0..batch {
            for (acc, &g) in head_bias_grad.iter_mut().zip(dlogits.row(b)) {
                *acc += g;
            }
        }
        let mut grad_h = matmul(&dlogits, &head.weight)?;

        let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(self.hidden_layers.len());
        for (k, layer) in self.hidden_layers.iter().enumerate().rev() {
            // ReLU mask from the pre-activation.
            let pre = &cache.preacts[k];
            for (g, &a) in grad_h.data_mut().iter_mut().zip(pre.data()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let (grads, dx) = layer.backward(&cache.layer_caches[k], &grad_h)?;
            layer_grads.push(grads);
            grad_h = dx;
        }
        layer_grads.reverse();

        Ok((
            LossReport {
                mean_loss,
                correct,
                batch_size: batch,
            },
            NetGradients {
                layers: layer_grads,
                head_weight: head_weight_grad,
                head_bias: head_bias_grad,
            },
        ))
    }

    /// Predicted classes for a batch; argmax ties break to the lowest index.
    pub fn infer_batch(&self, x: &Matrix, t: usize) -> Result<Vec<usize>> {
        let logits = self.forward(x, t)?;
        Ok((0..logits.rows()).map(|b| argmax(logits.row(b))).collect())
    }

    /// Mutable trainable blocks of task `t` in the canonical order.
    pub fn trainable_blocks_mut(&mut self, t: usize) -> Result<Vec<&mut [f64]>> {
        self.check_task(t)?;
        let mut blocks = Vec::new();
        for layer in &mut self.hidden_layers {
            blocks.extend(layer.trainable_blocks_mut(t));
        }
        let head = &mut self.heads[t - 1];
        blocks.push(head.weight.data_mut());
        blocks.push(&mut head.bias);
        Ok(blocks)
    }

    /// Lengths of the trainable blocks of task `t` (for optimizer state).
    pub fn trainable_block_lens(&mut self, t: usize) -> Result<Vec<usize>> {
        Ok(self.trainable_blocks_mut(t)?.iter().map(|b| b.len()).collect())
    }

    /// Total stored scalars, by enumeration.
    pub fn param_count(&self) -> u64 {
        let layers: u64 = self.hidden_layers.iter().map(FactorizedLayer::param_count).sum();
        let heads: u64 = self
            .heads
            .iter()
            .map(|h| (h.weight.rows() * h.weight.cols() + h.bias.len()) as u64)
            .sum();
        layers + heads
    }
}

/// Lowest-index argmax.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(logits.row(b)) == y)
        .count()
}

/// Mean cross-entropy and the softmax probabilities, log-sum-exp stabilized.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let batch = logits.rows();
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let lse = max + sum.ln();
        total += lse - logits.get(b, y);
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    (total / batch as f64, probs)
}
