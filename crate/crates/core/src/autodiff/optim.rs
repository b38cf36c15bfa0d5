use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Learning-rate schedule: linear warmup from 0, then linear decay to 0 at
/// `total_steps` (constant after warmup when `total_steps` is `None`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: Option<usize>,
}

impl Schedule {
    pub fn constant() -> Self {
        Self { warmup_steps: 0, total_steps: None }
    }

    /// Multiplier applied to the base learning rate at 1-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return step as f64 / self.warmup_steps as f64;
        }
        match self.total_steps {
            Some(total) if total > self.warmup_steps => {
                let remaining = total.saturating_sub(step) as f64;
                remaining / (total - self.warmup_steps) as f64
            }
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Fold weight decay into the gradient (classic Adam with L2) instead of
    /// decaying the weights directly.
    #[serde(default)]
    pub coupled_decay: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            schedule: Schedule::constant(),
            max_grad_norm: None,
            coupled_decay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Number of updates this parameter has received, for bias correction.
    t: u64,
}

/// AdamW with decoupled weight decay. Only parameters present in the
/// gradient map are touched, so absent parameters stay bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step.max(1))
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient { param: name.clone(), count: bad });
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let cfg = self.config;
        let lr = cfg.lr * cfg.schedule.factor(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            mo.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(mo.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(mo.t as i32);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut mo.m).zip(&mut mo.v) {
                let gi = gi * clip + if cfg.coupled_decay { cfg.weight_decay * *w } else { 0.0 };
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let decay = if cfg.coupled_decay { 0.0 } else { cfg.weight_decay * *w };
                *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay);
            }
        }
        Ok(())
    }
}
