//! One optimisation step of the full objective.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::optim::{adamw_step, lr_schedule, AdamState};
use crate::autodiff::Graph;
use crate::config::{Config, EmaSchedule};
use crate::data::ViewBundle;
use crate::error::{Error, Result};
use crate::losses::{objective, total_loss, LossReport};
use crate::model::ModelState;
use crate::tensor::Tensor;

/// EMA momentum used after step `step` (1-based) of `total` steps.
pub fn ema_momentum(step: usize, total: usize, base: f64, schedule: EmaSchedule) -> f64 {
    match schedule {
        EmaSchedule::Constant => base,
        EmaSchedule::Cosine => {
            let t = (step as f64 / total as f64).min(1.0);
            1.0 - (1.0 - base) * ((PI * t).cos() + 1.0) / 2.0
        }
    }
}

/// Forward, backward, AdamW on the online parameters, then the EMA update of
/// the target parameters. `step` counts from 1.
pub fn train_step(
    state: &mut ModelState,
    adam: &mut AdamState,
    bundles: &[ViewBundle],
    cfg: &Config,
    step: usize,
) -> Result<LossReport> {
    let t = &cfg.train;
    let mut g = Graph::new();
    let (online, target) = state.bind(&mut g);
    let obj = objective(
        &mut g,
        &online,
        &target,
        &state.config,
        bundles,
        t.flags,
        t.weights,
        t.tau,
    )?;
    let w_dv = if t.flags.use_ldv { t.weights.dv } else { 0.0 };
    let mut weights = t.weights;
    weights.dv = w_dv;
    let mut report = total_loss(
        step,
        g.value(obj.l_r).item(),
        g.value(obj.l_dv).item(),
        g.value(obj.l_st).item(),
        weights,
    )?;
    report.total = g.value(obj.total).item();
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {} at step {step}", report.total)));
    }

    let grads = g.backward(obj.total)?;
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, &v) in online.iter() {
        named.insert(name.clone(), grads.get_or_zeros(v, g.value(v)));
    }
    if t.diagnostics {
        let mut norms = [0.0; 3];
        for (i, term) in [obj.l_r, obj.l_dv, obj.l_st].into_iter().enumerate() {
            let gt = g.backward(term)?;
            norms[i] = online
                .iter()
                .filter_map(|(_, &v)| gt.get(v))
                .map(Tensor::norm_sq)
                .sum::<f64>()
                .sqrt();
        }
        report.grad_norms = Some(norms);
    }

    let lr = lr_schedule(step, &cfg.optim);
    let outcome = adamw_step(&mut state.online, &named, adam, &cfg.optim, lr)?;
    report.skipped = !outcome.applied;
    let m = ema_momentum(step, cfg.optim.total_steps, t.ema_momentum, t.ema_schedule);
    state.ema_update(m)?;
    report.lr = lr;
    report.ema_m = m;
    Ok(report)
}
