//! Finite-difference gradient verification.
//!
//! The checker perturbs every trainable scalar of a task, re-evaluates the
//! batch loss through the forward path only, and compares the central
//! difference against the analytic gradient from the backward pass. It is
//! deliberately independent of the backward implementation: only
//! `loss_only` (forward + cross-entropy) is used to produce the numeric
//! side.

use crate::error::Result;
use crate::linalg::Matrix;
use crate::network::MultiHeadNet;

/// Analytic/numeric gradient pairs for every trainable scalar of one task.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// True if every pair satisfies `|a - n| <= max(abs_floor, rel_tol * max(|a|, |n|))`.
    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.worst_violation(rel_tol, abs_floor) <= 0.0
    }

    /// Largest `|a - n| - max(abs_floor, rel_tol * max(|a|, |n|))`; anything
    /// above zero is a failure.
    pub fn worst_violation(&self, rel_tol: f64, abs_floor: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(a, n)| (a - n).abs() - abs_floor.max(rel_tol * a.abs().max(n.abs())))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Compare analytic gradients against central finite differences with step `h`
/// on one batch. The network is restored to its original parameters.
pub fn check_gradients(
    net: &mut MultiHeadNet,
    x: &Matrix,
    labels: &[usize],
    t: usize,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = net.loss_and_backward(x, labels, t)?;
    let analytic: Vec<f64> = grads.blocks().into_iter().flatten().copied().collect();

    let mut pairs = Vec::with_capacity(analytic.len());
    let n_blocks = net.trainable_blocks_mut(t)?.len();
    let mut flat = 0;
    for bi in 0..n_blocks {
        let len = net.trainable_blocks_mut(t)?[bi].len();
        for idx in 0..len {
            net.trainable_blocks_mut(t)?[bi][idx] += h;
            let up = net.loss_only(x, labels, t)?;
            net.trainable_blocks_mut(t)?[bi][idx] -= 2.0 * h;
            let down = net.loss_only(x, labels, t)?;
            net.trainable_blocks_mut(t)?[bi][idx] += h;
            pairs.push((analytic[flat], (up - down) / (2.0 * h)));
            flat += 1;
        }
    }
    Ok(GradCheckReport { pairs })
}
