//! Adaptive-moment updates, global-norm clipping and the step schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for the trainable entries of one store.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    config: AdamConfig,
    steps: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = |e: &crate::params::ParamEntry<S>| vec![S::zero(); if e.kind == ParamKind::Trainable { e.tensor.len() } else { 0 }];
        Self {
            config,
            steps: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected update of every trainable entry that has a
    /// gradient. `grad_scale` multiplies all gradients (used for clipping).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<&Tensor<S>>], lr: f64, grad_scale: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!("optimiser state for {} entries, store `{}` has {}", self.m.len(), store.name(), store.len())));
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps, k) = (S::lit(c.beta1), S::lit(c.beta2), S::lit(c.eps), S::lit(grad_scale));
        let step_size = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[i] else { continue };
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let p = store.get_mut(id);
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient of {} values for parameter of {}", g.len(), p.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * k;
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradients of several stores.
pub fn global_norm<S: Scalar>(groups: &[&[Option<&Tensor<S>>]]) -> f64 {
    groups.iter().flat_map(|g| g.iter().flatten()).map(|t| t.sum_squares().to_f64_lossy()).sum::<f64>().sqrt()
}

/// Factor that brings `norm` down to `max_norm` (1 when already inside).
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

/// Piecewise-constant rate: `base / divisor^k` with `k` the number of
/// milestones strictly below the 1-based `epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub divisor: f64,
}

impl LrSchedule {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite() && self.divisor >= 1.0) {
            return Err(Error::Config(format!("learning rate {} / divisor {} invalid", self.base, self.divisor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} must be strictly ascending", self.milestones)));
        }
        if self.milestones.iter().any(|&m| m == 0 || m > epochs) {
            return Err(Error::Config(format!("milestones {:?} must lie within 1..={epochs}", self.milestones)));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.base / self.divisor.powi(k as i32)
    }
}
