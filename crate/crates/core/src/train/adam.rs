use serde::{Deserialize, Serialize};

use crate::autodiff::{cst, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    skipped: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
            skipped: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates refused because a gradient was not finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update; returns `false` (and leaves everything untouched)
    /// when any gradient entry is NaN or infinite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        let mut scale = T::one();
        if let Some(limit) = self.config.clip_norm {
            let norm = grads
                .iter()
                .flatten()
                .map(|g| {
                    let g = g.to_f64().unwrap_or(0.0);
                    g * g
                })
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                scale = cst(limit / norm);
            }
        }
        self.t += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let step = cst::<T>(lr / (1.0 - b1.powi(self.t as i32)));
        let v_corr = cst::<T>(1.0 / (1.0 - b2.powi(self.t as i32)));
        let (b1t, b2t, eps) = (cst::<T>(b1), cst::<T>(b2), cst::<T>(self.config.eps));
        let (one_b1, one_b2) = (cst::<T>(1.0 - b1), cst::<T>(1.0 - b2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                *w -= step * *mi / ((*vi * v_corr).sqrt() + eps);
            }
        }
        Ok(true)
    }
}
