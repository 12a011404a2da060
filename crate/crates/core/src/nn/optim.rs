use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use crate::{Error, Result};

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base_lr: lr,
            min_lr: lr,
            warmup_steps: 0,
            total_steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
            grad_clip: Some(3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub updated: usize,
}

/// AdamW with decoupled weight decay on matrices only. Moments are keyed by
/// parameter name so they survive a checkpoint round trip exactly.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

impl AdamW {
    pub fn new(config: AdamWConfig, schedule: LrSchedule) -> Self {
        AdamW {
            config,
            schedule,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter of `store` that has a non-zero gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<StepStats> {
        let mut collected = Vec::new();
        let mut sq = 0.0f64;
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = to_f64_vec(g)?;
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
            collected.push((name.clone(), var, g));
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient".into(),
                step: self.step,
            });
        }
        let scale = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        let lr = self.schedule.at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let updated = collected.len();
        for (name, var, g) in collected {
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if var.as_tensor().rank() >= 2 { self.config.weight_decay } else { 0.0 };
            let mut p = to_f64_vec(var.as_tensor())?;
            for i in 0..n {
                let gi = g[i] * scale;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.config.eps) + decay * p[i]);
            }
            let shape = var.as_tensor().dims().to_vec();
            let new = Tensor::from_vec(p, shape, var.device())?.to_dtype(var.dtype())?;
            var.set(&new)?;
        }
        Ok(StepStats { lr, grad_norm, updated })
    }

    /// Moments as `(key, values)` with keys `m/<param>` and `v/<param>`.
    pub fn export_state(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (k, v) in &self.m {
            out.push((format!("m/{k}"), v.clone()));
        }
        for (k, v) in &self.v {
            out.push((format!("v/{k}"), v.clone()));
        }
        out
    }

    pub fn import_state(&mut self, step: u64, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (key, values) in entries {
            if let Some(name) = key.strip_prefix("m/") {
                self.m.insert(name.to_string(), values);
            } else if let Some(name) = key.strip_prefix("v/") {
                self.v.insert(name.to_string(), values);
            } else {
                return Err(Error::contract(format!("unknown optimizer state key `{key}`")));
            }
        }
        self.step = step;
        Ok(())
    }
}
