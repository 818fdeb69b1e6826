//! AdamW with decoupled weight decay and the warmup-cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Also decay rank-0/1 tensors (biases, norm gains). Off by default.
    pub decay_vectors: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            min_lr: 1e-5,
            eps: 1e-8,
            clip_norm: Some(3.0),
            decay_vectors: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("optim.{name} = {b} outside (0, 1)")));
            }
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "optim.warmup_steps {} must be below optim.total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.peak_lr < 0.0 || self.min_lr < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("negative learning rate, decay or eps".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("optim.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`. Steps past the end stay at `min_lr`.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * t).cos())
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        AdamState {
            m: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            v: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            t: 0,
        }
    }
}

/// Outcome of one optimizer call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub applied: bool,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// One AdamW update at learning rate `lr`.
///
/// Non-finite gradients skip the update and leave params and moments
/// untouched; the outcome reports `applied = false`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<StepOutcome> {
    for (name, p) in params.iter() {
        let congruent = |t: Option<&Tensor>| t.is_some_and(|t| t.shape() == p.shape());
        if !congruent(grads.get(name)) || !congruent(state.m.get(name)) || !congruent(state.v.get(name)) {
            return Err(Error::Mismatch(format!("gradient or moment for {name} missing or misshapen")));
        }
    }
    let grad_norm = global_norm(grads);
    if !grad_norm.is_finite() {
        return Ok(StepOutcome {
            applied: false,
            grad_norm,
        });
    }
    let clip = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let decay = if p.ndim() >= 2 || cfg.decay_vectors {
            cfg.weight_decay
        } else {
            0.0
        };
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *x -= lr * decay * *x;
            *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(StepOutcome {
        applied: true,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, shape: &[usize], v: f64) -> ParamSet {
        [(name.to_string(), Tensor::full(shape, v))].into_iter().collect()
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig {
            peak_lr: 5e-5,
            min_lr: 1e-6,
            warmup_steps: 10,
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(10, &cfg), 5e-5);
        assert!((lr_schedule(100, &cfg) - 1e-6).abs() < 1e-18);
        let mut prev = lr_schedule(10, &cfg);
        for s in 11..=100 {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one("w", &[2, 2], 0.7);
        let g = one("w", &[2, 2], 0.0);
        let mut s = AdamState::new(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut s, &cfg, 0.1).unwrap();
        assert_eq!(p["w"].data(), &[0.7; 4]);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = one("w", &[1, 2], 2.0);
        let g = one("w", &[1, 2], 0.0);
        let mut s = AdamState::new(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut s, &cfg, 0.1).unwrap();
        assert_eq!(p["w"].data(), &[2.0 * (1.0 - 0.01); 2]);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = one("w", &[1, 1], 1.0);
        let g = one("w", &[1, 1], f64::NAN);
        let mut s = AdamState::new(&p);
        let out = adamw_step(&mut p, &g, &mut s, &OptimizerConfig::default(), 0.1).unwrap();
        assert!(!out.applied);
        assert_eq!(p["w"].data(), &[1.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut p = one("w", &[1, 1], 0.0);
        let g = one("w", &[1, 1], 30.0);
        let mut s = AdamState::new(&p);
        let out = adamw_step(&mut p, &g, &mut s, &OptimizerConfig::default(), 0.1).unwrap();
        assert_eq!(out.grad_norm, 30.0);
        assert!((s.m["w"].data()[0] - 0.1 * 3.0).abs() < 1e-15);
    }
}
