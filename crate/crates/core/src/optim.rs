//! Adam over the per-task trainable parameter blocks.
//!
//! State is created fresh for every task: moment buffers from the previous
//! task refer to parameters that are frozen now, so carrying them over would
//! be meaningless. Parameters are handled as a list of flat blocks in the
//! canonical order produced by `MultiHeadNet::trainable_blocks_mut`.

use crate::error::{ItlError, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ItlError::invalid("lr", format!("must be > 0, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ItlError::InvalidArgument {
                    name: if name == "beta1" { "beta1" } else { "beta2" },
                    detail: format!("must be in [0, 1), got {v}"),
                });
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(ItlError::invalid("eps", format!("must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for blocks of the given lengths, step 0.
    pub fn new(block_lens: &[usize], config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            step: 0,
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update, in place.
    ///
    /// Rejects shape mismatches and non-finite gradients before touching any
    /// parameter, so a failed step leaves everything unchanged.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ItlError::shape(
                "adam step",
                format!(
                    "expected {} blocks, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (bi, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(ItlError::shape(
                    "adam step",
                    format!(
                        "block {bi}: state len {}, param len {}, grad len {}",
                        m.len(),
                        p.len(),
                        g.len()
                    ),
                ));
            }
            if let Some(idx) = g.iter().position(|x| !x.is_finite()) {
                return Err(ItlError::NonFinite {
                    context: format!("gradient block {bi}, entry {idx}"),
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
