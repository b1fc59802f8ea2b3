//! AdamW with decoupled weight decay, global-norm clipping and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, clip: 1.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{n} must lie in [0, 1), got {b}")));
            }
        }
        for (n, v) in [("eps", self.eps), ("weight_decay", self.weight_decay), ("clip", self.clip)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{n} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up, then cosine decay to `min_ratio · lr`.
    Cosine { warmup: f64, min_ratio: f64 },
    /// Linear warm-up, plateau, linear cool-down to zero. Fractions of the run.
    Trapezoid { warmup: f64, cooldown: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Trapezoid { warmup: 0.05, cooldown: 0.2 }
    }
}

fn span(frac: f64, total: usize) -> usize {
    (frac * total as f64).round() as usize
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant => true,
            LrSchedule::Cosine { warmup, min_ratio } => (0.0..=1.0).contains(&warmup) && (0.0..=1.0).contains(&min_ratio),
            LrSchedule::Trapezoid { warmup, cooldown } => warmup >= 0.0 && cooldown >= 0.0 && warmup + cooldown <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Learning rate at 0-based `step` of a `total`-step run.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let warm = |w: usize| if step < w { Some(base * (step + 1) as f64 / w as f64) } else { None };
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup, min_ratio } => {
                let w = span(warmup, total);
                if let Some(lr) = warm(w) {
                    return lr;
                }
                let rest = total.saturating_sub(w).max(1) as f64;
                let p = ((step - w) as f64 / rest).min(1.0);
                base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
            LrSchedule::Trapezoid { warmup, cooldown } => {
                let w = span(warmup, total);
                let c = span(cooldown, total);
                if let Some(lr) = warm(w) {
                    return lr;
                }
                let start = total.saturating_sub(c);
                if step < start {
                    base
                } else {
                    base * total.saturating_sub(step) as f64 / (c + 1) as f64
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: usize,
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

fn trainable(name: &str) -> bool {
    !name.starts_with("state.")
}

impl OptimState {
    /// One update of every trainable parameter. Parameters without a
    /// gradient are treated as having a zero one. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, cfg: &AdamWConfig, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {}", self.step)));
        }
        let scale = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let n = p.len();
            if let Some(gr) = grads.get(name) {
                if gr.len() != n {
                    return Err(Error::Dimension(format!("gradient of {name} has {} values for {n}", gr.len())));
                }
            }
            let decay = if p.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i] * scale);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *x -= lr * (upd + decay * *x);
            }
        }
        Ok(norm)
    }
}
