//! Factorized layers with per-task rank increments.
//!
//! A layer's weight for task `t` is a sum of low-rank terms, one per task
//! learned so far. Term `i` is `U_i diag(s_{i,t}) V_i^T` where `U_i`, `V_i`
//! were learned during task `i` and frozen afterwards, while the selector
//! vector `s_{i,t}` (the diagonal) belongs to task `t` and rescales the old
//! term for the new task. Training task `t` therefore touches exactly:
//! `U_t`, `V_t`, all selectors owned by `t`, and the task-`t` bias. Nothing
//! owned by an earlier task changes, ever, which is what makes task-`j`
//! outputs bit-stable across later training.
//!
//! The forward and backward passes work entirely on the factors; the dense
//! weight is only ever materialized by [`FactorizedLayer::compose_weight`],
//! a test/export path.
//!
//! Shapes, with `n = in_dim`, `m = out_dim`, batch rows `B`:
//!
//! ```text
//! forward:  Z_i = X V_i                 (B x r_i)
//!           Y   = sum_i (Z_i . s_i) U_i^T + bias_t
//! backward: P_i = G U_i                 (B x r_i)
//!           ds_i = colsum(P_i . Z_i)
//!           dU_t = (G^T Z_t) . s_t      (columns scaled)
//!           dV_t = X^T (P_t . s_t)
//!           dX   = sum_i (P_i . s_i) V_i^T
//!           dbias_t = colsum(G)
//! ```
//! where `.` scales columns by the selector entries.

use crate::error::{ItlError, Result};
use crate::linalg::{matmul, orthogonal_init, Matrix, SeededRng};

/// One low-rank term: `U diag(s) V^T` for whatever selector `s` applies.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    u: Matrix,
    v: Matrix,
    rank: usize,
    frozen: bool,
    origin_task: usize,
}

impl FactorPair {
    /// Rebuild a pair from raw parts (checkpoint loading).
    pub fn from_parts(
        u: Matrix,
        v: Matrix,
        rank: usize,
        frozen: bool,
        origin_task: usize,
    ) -> Result<Self> {
        if u.cols() != rank || v.cols() != rank || rank == 0 || origin_task == 0 {
            return Err(ItlError::Checkpoint(format!(
                "invalid factor pair: u {}x{}, v {}x{}, rank {rank}, origin {origin_task}",
                u.rows(),
                u.cols(),
                v.rows(),
                v.cols()
            )));
        }
        Ok(FactorPair {
            u,
            v,
            rank,
            frozen,
            origin_task,
        })
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn origin_task(&self) -> usize {
        self.origin_task
    }
}

/// Selector weights owned by `owner_task`, scaling the factor pair that
/// originated in `source_task`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorVector {
    pub owner_task: usize,
    pub source_task: usize,
    pub weights: Vec<f64>,
}

/// A hidden layer whose per-task weight is a selector-weighted sum of
/// frozen low-rank factor pairs. Task ids are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLayer {
    in_dim: usize,
    out_dim: usize,
    /// One entry per task, origin_task strictly increasing.
    factors: Vec<FactorPair>,
    /// `selectors[t-1][i-1]` is the selector owned by task `t` for factor `i`.
    selectors: Vec<Vec<SelectorVector>>,
    /// `biases[t-1]` is the task-`t` bias, length `out_dim`.
    biases: Vec<Vec<f64>>,
}

/// Intermediates kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    task: usize,
    x: Matrix,
    /// `z[i-1] = X V_i`, one per factor `i <= task`.
    z: Vec<Matrix>,
}

/// Gradients for the trainable set of one task.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub du: Matrix,
    pub dv: Matrix,
    /// One per source task `i = 1..=t`, each shaped like its selector.
    pub dselectors: Vec<Vec<f64>>,
    pub dbias: Vec<f64>,
}

/// New matrix with column `j` scaled by `s[j]`.
fn scale_cols(m: &Matrix, s: &[f64]) -> Matrix {
    assert_eq!(m.cols(), s.len());
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (x, &f) in out.row_mut(i).iter_mut().zip(s) {
            *x *= f;
        }
    }
    out
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, &x) in out.iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
    out
}

impl FactorizedLayer {
    /// Create a layer for the first task: one unfrozen orthogonally
    /// initialized factor pair of rank `r1`, an all-ones selector (identity
    /// diagonal), and a zero bias. `U` is drawn before `V` from `rng`.
    pub fn new(in_dim: usize, out_dim: usize, r1: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::check_rank(in_dim, out_dim, r1)?;
        let u = orthogonal_init(out_dim, r1, rng)?;
        let v = orthogonal_init(in_dim, r1, rng)?;
        Ok(FactorizedLayer {
            in_dim,
            out_dim,
            factors: vec![FactorPair {
                u,
                v,
                rank: r1,
                frozen: false,
                origin_task: 1,
            }],
            selectors: vec![vec![SelectorVector {
                owner_task: 1,
                source_task: 1,
                weights: vec![1.0; r1],
            }]],
            biases: vec![vec![0.0; out_dim]],
        })
    }

    fn check_rank(in_dim: usize, out_dim: usize, r: usize) -> Result<()> {
        if r < 1 {
            return Err(ItlError::invalid("rank", "rank must be >= 1"));
        }
        let cap = in_dim.min(out_dim);
        if r > cap {
            return Err(ItlError::invalid(
                "rank",
                format!("rank {r} exceeds min(in_dim, out_dim) = {cap}"),
            ));
        }
        Ok(())
    }

    /// Start task `t = current + 1`: freeze every existing factor pair,
    /// append a fresh orthogonally initialized pair of rank `r_t`, open
    /// selectors for the new task (ones for its own pair, zeros for all
    /// frozen pairs), and add a zero bias. Selectors owned by earlier tasks
    /// are untouched.
    pub fn add_task(&mut self, r_t: usize, rng: &mut SeededRng) -> Result<()> {
        Self::check_rank(self.in_dim, self.out_dim, r_t)?;
        let t = self.num_tasks() + 1;
        for pair in &mut self.factors {
            pair.frozen = true;
        }
        let u = orthogonal_init(self.out_dim, r_t, rng)?;
        let v = orthogonal_init(self.in_dim, r_t, rng)?;
        self.factors.push(FactorPair {
            u,
            v,
            rank: r_t,
            frozen: false,
            origin_task: t,
        });
        let mut row = Vec::with_capacity(t);
        for pair in &self.factors[..t - 1] {
            row.push(SelectorVector {
                owner_task: t,
                source_task: pair.origin_task,
                weights: vec![0.0; pair.rank],
            });
        }
        row.push(SelectorVector {
            owner_task: t,
            source_task: t,
            weights: vec![1.0; r_t],
        });
        self.selectors.push(row);
        self.biases.push(vec![0.0; self.out_dim]);
        Ok(())
    }

    /// Rebuild a layer from raw parts (checkpoint loading), validating the
    /// structural invariants.
    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        factors: Vec<FactorPair>,
        selectors: Vec<Vec<SelectorVector>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let t = factors.len();
        if t == 0 || selectors.len() != t || biases.len() != t {
            return Err(ItlError::Checkpoint(format!(
                "inconsistent layer parts: {} factors, {} selector owners, {} biases",
                t,
                selectors.len(),
                biases.len()
            )));
        }
        for (idx, pair) in factors.iter().enumerate() {
            let expect_frozen = idx + 1 < t;
            if pair.origin_task != idx + 1
                || pair.frozen != expect_frozen
                || pair.u.rows() != out_dim
                || pair.v.rows() != in_dim
                || pair.u.cols() != pair.rank
                || pair.v.cols() != pair.rank
            {
                return Err(ItlError::Checkpoint(format!(
                    "invalid factor pair at position {idx}"
                )));
            }
        }
        for (ti, row) in selectors.iter().enumerate() {
            if row.len() != ti + 1 {
                return Err(ItlError::Checkpoint(format!(
                    "task {} owns {} selectors, expected {}",
                    ti + 1,
                    row.len(),
                    ti + 1
                )));
            }
            for (si, sel) in row.iter().enumerate() {
                if sel.owner_task != ti + 1
                    || sel.source_task != si + 1
                    || sel.weights.len() != factors[si].rank
                {
                    return Err(ItlError::Checkpoint(format!(
                        "invalid selector ({}, {})",
                        ti + 1,
                        si + 1
                    )));
                }
            }
        }
        if biases.iter().any(|b| b.len() != out_dim) {
            return Err(ItlError::Checkpoint("bias length mismatch".into()));
        }
        Ok(FactorizedLayer {
            in_dim,
            out_dim,
            factors,
            selectors,
            biases,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_tasks(&self) -> usize {
        self.factors.len()
    }

    pub fn total_rank(&self) -> usize {
        self.factors.iter().map(|f| f.rank).sum()
    }

    pub fn factors(&self) -> &[FactorPair] {
        &self.factors
    }

    pub fn selector(&self, owner: usize, source: usize) -> Option<&SelectorVector> {
        self.selectors.get(owner.checked_sub(1)?)?.get(source.checked_sub(1)?)
    }

    pub fn selectors_of(&self, owner: usize) -> Option<&[SelectorVector]> {
        self.selectors.get(owner.checked_sub(1)?).map(|v| v.as_slice())
    }

    pub fn bias(&self, task: usize) -> Option<&[f64]> {
        self.biases.get(task.checked_sub(1)?).map(|v| v.as_slice())
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_tasks() {
            return Err(ItlError::UnknownTask {
                task: t,
                detail: format!("layer has {} tasks", self.num_tasks()),
            });
        }
        Ok(())
    }

    /// Materialize the dense `out_dim x in_dim` weight for task `t`.
    /// Test and export path only; training never calls this.
    pub fn compose_weight(&self, t: usize) -> Result<Matrix> {
        self.check_task(t)?;
        let mut w = Matrix::zeros(self.out_dim, self.in_dim);
        for sel in &self.selectors[t - 1] {
            let pair = &self.factors[sel.source_task - 1];
            let term = matmul(&scale_cols(&pair.u, &sel.weights), &pair.v.transpose())?;
            for (acc, x) in w.data_mut().iter_mut().zip(term.data()) {
                *acc += x;
            }
        }
        Ok(w)
    }

    fn forward_impl(&self, x: &Matrix, t: usize) -> Result<(Matrix, Vec<Matrix>)> {
        self.check_task(t)?;
        if x.cols() != self.in_dim {
            return Err(ItlError::shape(
                "layer forward",
                format!("input has {} columns, layer expects {}", x.cols(), self.in_dim),
            ));
        }
        let batch = x.rows();
        let mut y = Matrix::zeros(batch, self.out_dim);
        let mut zs = Vec::with_capacity(t);
        for sel in &self.selectors[t - 1] {
            let pair = &self.factors[sel.source_task - 1];
            let z = matmul(x, &pair.v)?;
            let term = matmul(&scale_cols(&z, &sel.weights), &pair.u.transpose())?;
            for (acc, v) in y.data_mut().iter_mut().zip(term.data()) {
                *acc += v;
            }
            zs.push(z);
        }
        let bias = &self.biases[t - 1];
        for i in 0..batch {
            for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok((y, zs))
    }

    /// Affine output for task `t` in factored form (no dense weight).
    pub fn forward(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        Ok(self.forward_impl(x, t)?.0)
    }

    /// Forward pass that also keeps the intermediates needed by [`Self::backward`].
    pub fn forward_train(&self, x: &Matrix, t: usize) -> Result<(Matrix, LayerCache)> {
        let (y, z) = self.forward_impl(x, t)?;
        Ok((
            y,
            LayerCache {
                task: t,
                x: x.clone(),
                z,
            },
        ))
    }

    /// Gradients for the task-`t` trainable set plus the gradient with
    /// respect to the layer input. Frozen factor pairs receive no gradient
    /// entries at all; only their selectors do.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Matrix) -> Result<(LayerGrads, Matrix)> {
        let t = cache.task;
        self.check_task(t)?;
        if cache.z.len() != t {
            return Err(ItlError::shape(
                "layer backward",
                format!("cache has {} z blocks, task {t} needs {t}", cache.z.len()),
            ));
        }
        if grad_out.rows() != cache.x.rows() || grad_out.cols() != self.out_dim {
            return Err(ItlError::shape(
                "layer backward",
                format!(
                    "grad_out is {}x{}, expected {}x{}",
                    grad_out.rows(),
                    grad_out.cols(),
                    cache.x.rows(),
                    self.out_dim
                ),
            ));
        }

        let dbias = column_sums(grad_out);
        let mut dselectors = Vec::with_capacity(t);
        let mut dx = Matrix::zeros(cache.x.rows(), self.in_dim);
        let mut du = None;
        let mut dv = None;

        for sel in &self.selectors[t - 1] {
            let i = sel.source_task;
            let pair = &self.factors[i - 1];
            let z = &cache.z[i - 1];
            let p = matmul(grad_out, &pair.u)?;

            let mut ds = vec![0.0; pair.rank];
            for b in 0..p.rows() {
                for ((acc, &pv), &zv) in ds.iter_mut().zip(p.row(b)).zip(z.row(b)) {
                    *acc += pv * zv;
                }
            }
            dselectors.push(ds);

            let p_scaled = scale_cols(&p, &sel.weights);
            let dx_term = matmul(&p_scaled, &pair.v.transpose())?;
            for (acc, v) in dx.data_mut().iter_mut().zip(dx_term.data()) {
                *acc += v;
            }

            if i == t {
                du = Some(scale_cols(&matmul(&grad_out.transpose(), z)?, &sel.weights));
                dv = Some(matmul(&cache.x.transpose(), &p_scaled)?);
            }
        }

        Ok((
            LayerGrads {
                du: du.expect("task t selector always present"),
                dv: dv.expect("task t selector always present"),
                dselectors,
                dbias,
            },
            dx,
        ))
    }

    /// Number of stored scalars (factors, selectors, biases) by enumeration.
    pub fn param_count(&self) -> u64 {
        let factors: usize = self
            .factors
            .iter()
            .map(|f| f.u.rows() * f.u.cols() + f.v.rows() * f.v.cols())
            .sum();
        let selectors: usize = self
            .selectors
            .iter()
            .flatten()
            .map(|s| s.weights.len())
            .sum();
        let biases: usize = self.biases.iter().map(|b| b.len()).sum();
        (factors + selectors + biases) as u64
    }

    /// Mutable views over the task-`t` trainable blocks, in the canonical
    /// order `U_t, V_t, s_{1,t}, ..., s_{t,t}, bias_t`. The caller must not
    /// rely on anything else changing: frozen tasks are not reachable here.
    pub(crate) fn trainable_blocks_mut(&mut self, t: usize) -> Vec<&mut [f64]> {
        let pair = &mut self.factors[t - 1];
        let mut blocks: Vec<&mut [f64]> = vec![pair.u.data_mut(), pair.v.data_mut()];
        for sel in &mut self.selectors[t - 1] {
            blocks.push(&mut sel.weights);
        }
        blocks.push(&mut self.biases[t - 1]);
        blocks
    }
}

impl LayerGrads {
    /// Flatten into the canonical block order used by
    /// [`FactorizedLayer::trainable_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut blocks: Vec<&[f64]> = vec![self.du.data(), self.dv.data()];
        for ds in &self.dselectors {
            blocks.push(ds);
        }
        blocks.push(&self.dbias);
        blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::derive_seed;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::new(seed)
    }

    /// Layer whose task-1 weight composes to the identity: factor columns are
    /// basis vectors, selector all ones, zero bias.
    fn identity_layer(n: usize) -> FactorizedLayer {
        let basis = Matrix::identity(n);
        FactorizedLayer::from_parts(
            n,
            n,
            vec![FactorPair {
                u: basis.clone(),
                v: basis,
                rank: n,
                frozen: false,
                origin_task: 1,
            }],
            vec![vec![SelectorVector {
                owner_task: 1,
                source_task: 1,
                weights: vec![1.0; n],
            }]],
            vec![vec![0.0; n]],
        )
        .unwrap()
    }

    /// Random layer trained through `tasks` tasks with the given ranks, with
    /// selectors and biases perturbed so nothing stays at its init value.
    fn random_layer(in_dim: usize, out_dim: usize, ranks: &[usize], seed: u64) -> FactorizedLayer {
        let mut r = rng(seed);
        let mut layer = FactorizedLayer::new(in_dim, out_dim, ranks[0], &mut r).unwrap();
        for &rt in &ranks[1..] {
            layer.add_task(rt, &mut r).unwrap();
        }
        let t = layer.num_tasks();
        let mut noise = rng(derive_seed(seed, "noise", 0, 0));
        for sel in &mut layer.selectors[t - 1] {
            for w in &mut sel.weights {
                *w += 0.5 * noise.next_normal();
            }
        }
        for b in &mut layer.biases[t - 1] {
            *b = 0.1 * noise.next_normal();
        }
        layer
    }

    #[test]
    fn new_layer_matches_contract() {
        let layer = FactorizedLayer::new(784, 256, 11, &mut rng(1)).unwrap();
        assert_eq!(layer.total_rank(), 11);
        assert_eq!(layer.selector(1, 1).unwrap().weights, vec![1.0; 11]);
        assert_eq!(layer.bias(1).unwrap(), vec![0.0; 256].as_slice());
        assert!(!layer.factors()[0].frozen());
    }

    #[test]
    fn new_layer_minimal_rank() {
        let layer = FactorizedLayer::new(4, 4, 1, &mut rng(2)).unwrap();
        let pair = &layer.factors()[0];
        assert_eq!((pair.u().rows(), pair.u().cols()), (4, 1));
        assert_eq!((pair.v().rows(), pair.v().cols()), (4, 1));
        assert_eq!(layer.selector(1, 1).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn new_layer_deterministic() {
        let a = FactorizedLayer::new(20, 10, 3, &mut rng(42)).unwrap();
        let b = FactorizedLayer::new(20, 10, 3, &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn new_layer_rejects_zero_rank() {
        assert!(FactorizedLayer::new(4, 4, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn add_task_selector_families() {
        let mut layer = FactorizedLayer::new(30, 20, 11, &mut rng(3)).unwrap();
        layer.add_task(1, &mut rng(4)).unwrap();
        assert_eq!(layer.total_rank(), 12);
        assert_eq!(layer.selector(2, 1).unwrap().weights, vec![0.0; 11]);
        assert_eq!(layer.selector(2, 2).unwrap().weights, vec![1.0]);
        assert!(layer.factors()[0].frozen());
        assert!(!layer.factors()[1].frozen());

        layer.add_task(1, &mut rng(5)).unwrap();
        assert_eq!(layer.total_rank(), 13);
        assert_eq!(layer.selectors.len(), 3);
        assert_eq!(layer.selectors_of(3).unwrap().len(), 3);
    }

    #[test]
    fn add_task_leaves_old_factors_bit_identical() {
        let mut layer = FactorizedLayer::new(12, 8, 3, &mut rng(6)).unwrap();
        let before_u: Vec<u64> = layer.factors()[0].u().data().iter().map(|x| x.to_bits()).collect();
        let before_v: Vec<u64> = layer.factors()[0].v().data().iter().map(|x| x.to_bits()).collect();
        layer.add_task(2, &mut rng(7)).unwrap();
        let after_u: Vec<u64> = layer.factors()[0].u().data().iter().map(|x| x.to_bits()).collect();
        let after_v: Vec<u64> = layer.factors()[0].v().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before_u, after_u);
        assert_eq!(before_v, after_v);
    }

    #[test]
    fn compose_single_rank_one_term() {
        let layer = FactorizedLayer::from_parts(
            2,
            2,
            vec![FactorPair {
                u: Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
                v: Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
                rank: 1,
                frozen: false,
                origin_task: 1,
            }],
            vec![vec![SelectorVector {
                owner_task: 1,
                source_task: 1,
                weights: vec![2.0],
            }]],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        let w = layer.compose_weight(1).unwrap();
        assert_eq!(w.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_zero_selectors_is_zero() {
        let mut layer = random_layer(5, 4, &[2], 8);
        for w in &mut layer.selectors[0][0].weights {
            *w = 0.0;
        }
        let w = layer.compose_weight(1).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
    }

    /// Independent oracle: each factor's term via an element-wise triple
    /// loop (multiplying as (u * s) * v, summing ranks in ascending order),
    /// terms added factor by factor — the same summation structure the
    /// implementation documents.
    fn compose_naive(layer: &FactorizedLayer, t: usize) -> Matrix {
        let mut w = Matrix::zeros(layer.out_dim(), layer.in_dim());
        for sel in layer.selectors_of(t).unwrap() {
            let pair = &layer.factors()[sel.source_task - 1];
            for a in 0..layer.out_dim() {
                for b in 0..layer.in_dim() {
                    let mut term = 0.0;
                    for rho in 0..pair.rank() {
                        term += (pair.u().get(a, rho) * sel.weights[rho]) * pair.v().get(b, rho);
                    }
                    w.set(a, b, w.get(a, b) + term);
                }
            }
        }
        w
    }

    #[test]
    fn compose_matches_naive_summation_exactly() {
        let layer = random_layer(7, 6, &[2, 3], 9);
        for t in 1..=2 {
            let got = layer.compose_weight(t).unwrap();
            let want = compose_naive(&layer, t);
            assert_eq!(got.data(), want.data());
        }
    }

    #[test]
    fn compose_rejects_unknown_task() {
        let layer = random_layer(4, 4, &[1], 10);
        assert!(layer.compose_weight(2).is_err());
        assert!(layer.compose_weight(0).is_err());
    }

    #[test]
    fn forward_identity_composition() {
        let layer = identity_layer(6);
        let x = Matrix::gaussian(3, 6, &mut rng(11));
        let y = layer.forward(&x, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn forward_zero_selectors_returns_bias() {
        let mut layer = random_layer(5, 3, &[2], 12);
        for w in &mut layer.selectors[0][0].weights {
            *w = 0.0;
        }
        layer.biases[0] = vec![0.5, -1.0, 2.0];
        let x = Matrix::gaussian(4, 5, &mut rng(13));
        let y = layer.forward(&x, 1).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn forward_matches_dense_path() {
        for seed in 0..8 {
            let layer = random_layer(9, 7, &[3, 1, 2], 20 + seed);
            let x = Matrix::gaussian(5, 9, &mut rng(40 + seed));
            for t in 1..=3 {
                let fact = layer.forward(&x, t).unwrap();
                let w = layer.compose_weight(t).unwrap();
                let mut dense = matmul(&x, &w.transpose()).unwrap();
                for i in 0..dense.rows() {
                    for (v, b) in dense.row_mut(i).iter_mut().zip(layer.bias(t).unwrap()) {
                        *v += b;
                    }
                }
                assert!(fact.max_abs_diff(&dense) <= 1e-10);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input_width() {
        let layer = random_layer(5, 4, &[2], 14);
        let x = Matrix::zeros(2, 6);
        assert!(layer.forward(&x, 1).is_err());
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let layer = random_layer(6, 5, &[2, 1], 15);
        let x = Matrix::gaussian(3, 6, &mut rng(16));
        let (_, cache) = layer.forward_train(&x, 2).unwrap();
        let g = Matrix::zeros(3, 5);
        let (grads, dx) = layer.backward(&cache, &g).unwrap();
        assert!(grads.du.data().iter().all(|&v| v == 0.0));
        assert!(grads.dv.data().iter().all(|&v| v == 0.0));
        assert!(grads.dselectors.iter().flatten().all(|&v| v == 0.0));
        assert!(grads.dbias.iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_input_of_identity_layer_is_grad_out() {
        let layer = identity_layer(5);
        let x = Matrix::gaussian(2, 5, &mut rng(17));
        let (_, cache) = layer.forward_train(&x, 1).unwrap();
        let g = Matrix::gaussian(2, 5, &mut rng(18));
        let (_, dx) = layer.backward(&cache, &g).unwrap();
        assert_eq!(dx.data(), g.data());
    }

    /// Central finite differences of the linear probe loss
    /// `L = sum(W . forward(X))` against every analytic gradient.
    #[test]
    fn backward_matches_finite_differences() {
        let in_dim = 5;
        let out_dim = 6;
        let batch = 3;
        let t = 2;
        let mut layer = random_layer(in_dim, out_dim, &[2, 1], 19);
        let x = Matrix::gaussian(batch, in_dim, &mut rng(21));
        let probe = Matrix::gaussian(batch, out_dim, &mut rng(22));
        let h = 1e-5;

        let loss = |layer: &FactorizedLayer| -> f64 {
            let y = layer.forward(&x, t).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = layer.forward_train(&x, t).unwrap();
        let (grads, dx) = layer.backward(&cache, &probe).unwrap();
        let analytic: Vec<f64> = grads
            .blocks()
            .into_iter()
            .flatten()
            .copied()
            .collect();

        let mut numeric = Vec::with_capacity(analytic.len());
        let n_blocks = layer.trainable_blocks_mut(t).len();
        for bi in 0..n_blocks {
            let len = layer.trainable_blocks_mut(t)[bi].len();
            for idx in 0..len {
                layer.trainable_blocks_mut(t)[bi][idx] += h;
                let up = loss(&layer);
                layer.trainable_blocks_mut(t)[bi][idx] -= 2.0 * h;
                let down = loss(&layer);
                layer.trainable_blocks_mut(t)[bi][idx] += h;
                numeric.push((up - down) / (2.0 * h));
            }
        }

        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(&numeric) {
            let tol = 1e-7_f64.max(1e-4 * a.abs().max(n.abs()));
            assert!((a - n).abs() <= tol, "analytic {a} vs numeric {n}");
        }

        // Input gradient via the same probe loss, perturbing x.
        let mut x_var = x.clone();
        for i in 0..batch {
            for j in 0..in_dim {
                let orig = x_var.get(i, j);
                x_var.set(i, j, orig + h);
                let up: f64 = {
                    let y = layer.forward(&x_var, t).unwrap();
                    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
                };
                x_var.set(i, j, orig - h);
                let down: f64 = {
                    let y = layer.forward(&x_var, t).unwrap();
                    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
                };
                x_var.set(i, j, orig);
                let n = (up - down) / (2.0 * h);
                let a = dx.get(i, j);
                let tol = 1e-7_f64.max(1e-4 * a.abs().max(n.abs()));
                assert!((a - n).abs() <= tol, "dx[{i},{j}] analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        // (in+out) * sum(r_i) factors + sum_t sum_{i<=t} r_i selectors + T*out biases
        let ranks = [3usize, 1, 2];
        let (in_dim, out_dim) = (10usize, 7usize);
        let layer = random_layer(in_dim, out_dim, &ranks, 23);
        let total_rank: usize = ranks.iter().sum();
        let mut selector_count = 0;
        for t in 1..=ranks.len() {
            selector_count += ranks[..t].iter().sum::<usize>();
        }
        let expect = (in_dim + out_dim) * total_rank + selector_count + ranks.len() * out_dim;
        assert_eq!(layer.param_count(), expect as u64);
    }

    #[test]
    fn backward_requires_matching_cache() {
        let layer = random_layer(4, 3, &[1, 1], 24);
        let x = Matrix::gaussian(2, 4, &mut rng(25));
        let (_, cache) = layer.forward_train(&x, 1).unwrap();
        // Cache built for task 1 has one z block; task 2 backward must reject it.
        let g = Matrix::zeros(2, 3);
        let mut bad = cache.clone();
        bad.task = 2;
        assert!(layer.backward(&bad, &g).is_err());
    }
}
