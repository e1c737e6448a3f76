//! First-order optimizers and learning-rate schedules.
//!
//! Weight decay is coupled (added to the gradient before the moment updates).
//! Parameters whose gradient is `None` are left untouched, state included.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0) {
            v.push(format!("{prefix}.lr must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{prefix}.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("{prefix}.eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("{prefix}.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step_with_lr(params, grads, self.config.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        let c = &self.config;
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let theta = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..theta.len() {
                let g = grad.data()[j] + c.weight_decay * theta[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let denom = (v[j] / bc2).sqrt() + c.eps;
                theta[j] -= lr * (m[j] / bc1) / denom;
            }
        }
    }

    /// Moment buffers and step counters as a parameter store.
    pub fn state(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for i in 0..self.m.len() {
            s.push(format!("{prefix}.m.{i}"), self.m[i].clone());
            s.push(format!("{prefix}.v.{i}"), self.v[i].clone());
            s.push(format!("{prefix}.t.{i}"), Tensor::scalar(self.steps[i] as f64));
        }
        s
    }

    pub fn load_state(&mut self, prefix: &str, s: &ParamStore) -> Result<()> {
        for i in 0..self.m.len() {
            let get = |k: &str| {
                s.by_name(&format!("{prefix}.{k}.{i}"))
                    .ok_or_else(|| invalid(format!("optimizer state {prefix}.{k}.{i} missing")))
            };
            let (m, v, t) = (get("m")?, get("v")?, get("t")?);
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(invalid(format!("optimizer state {prefix}.{i} has wrong shape")));
            }
            self.m[i] = m.clone();
            self.v[i] = v.clone();
            self.steps[i] = t.data()[0] as u64;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, params: &ParamStore) -> Self {
        Self {
            momentum,
            weight_decay,
            buf: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let theta = params.get_mut(i).data_mut();
            let b = self.buf[i].data_mut();
            for j in 0..theta.len() {
                let g = grad.data()[j] + self.weight_decay * theta[j];
                b[j] = self.momentum * b[j] + g;
                theta[j] -= lr * b[j];
            }
        }
    }

    pub fn state(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, b) in self.buf.iter().enumerate() {
            s.push(format!("{prefix}.buf.{i}"), b.clone());
        }
        s
    }

    pub fn load_state(&mut self, prefix: &str, s: &ParamStore) -> Result<()> {
        for i in 0..self.buf.len() {
            let b = s
                .by_name(&format!("{prefix}.buf.{i}"))
                .ok_or_else(|| invalid(format!("optimizer state {prefix}.buf.{i} missing")))?;
            if b.shape() != self.buf[i].shape() {
                return Err(invalid(format!("optimizer state {prefix}.buf.{i} has wrong shape")));
            }
            self.buf[i] = b.clone();
        }
        Ok(())
    }
}

/// Cosine annealing from `max` at step 0 to `min` at `total`.
pub fn cosine_lr(step: usize, total: usize, max: f64, min: f64) -> f64 {
    if total == 0 {
        return max;
    }
    let t = step.min(total) as f64 / total as f64;
    min + 0.5 * (max - min) * (1.0 + (PI * t).cos())
}

/// `base * (1 - step/total)^power`, zero at `total`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * (1.0 - t).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("x", Tensor::scalar(v));
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = one(1.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[Some(Tensor::scalar(3.0))]);
        assert!((p.get(0).data()[0] - (1.0 - 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = one(5.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let x = p.get(0).data()[0];
            opt.step(&mut p, &[Some(Tensor::scalar(2.0 * x))]);
        }
        assert!(p.get(0).data()[0].abs() < 1e-2);
    }

    #[test]
    fn sgd_momentum_matches_recurrence() {
        let mut p = one(1.0);
        let mut opt = Sgd::new(0.9, 0.0, &p);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], 0.1);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], 0.1);
        // buf: 1, then 1.9; x: 1 - 0.1 - 0.19
        assert!((p.get(0).data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut p = one(2.0);
        let mut opt = Sgd::new(0.9, 1e-3, &p);
        opt.step(&mut p, &[None], 0.1);
        assert_eq!(p.get(0).data()[0], 2.0);
    }

    #[test]
    fn state_round_trip() {
        let mut p = one(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::scalar(0.5))]);
        let s = opt.state("alpha");
        let mut fresh = Adam::new(AdamConfig::default(), &p);
        fresh.load_state("alpha", &s).unwrap();
        assert_eq!(fresh, opt);
    }

    #[test]
    fn schedules_hit_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.025, 0.001), 0.025);
        assert!((cosine_lr(100, 100, 0.025, 0.001) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.025, 0.001) - 0.013).abs() < 1e-12);
        assert_eq!(poly_lr(0, 10, 0.01, 0.9), 0.01);
        assert_eq!(poly_lr(10, 10, 0.01, 0.9), 0.0);
    }
}
