//! Central-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::data::{mask_random, normalize_targets, ViewBundle};
use crate::error::{Error, Result};
use crate::losses::{objective, AblationFlags, LossWeights, DEFAULT_TAU};
use crate::model::{Bound, ModelConfig, ModelState};
use crate::seed::{self, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Maximum relative error per element.
    pub tol: f64,
    /// Gradient magnitudes below this are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar built by `f` against the
/// five-point central difference
/// `(8 (f(x + h) - f(x - h)) - (f(x + 2h) - f(x - 2h))) / 12h`, `h = eps`,
/// for every element of every parameter.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `params`.
/// Stop-gradient nodes are held at their values at the unperturbed point, so
/// the numeric derivative matches what backpropagation computes.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let frozen = g.detached_values().to_vec();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_frozen_detach(frozen.clone());
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = work[pi].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[ei] = orig + offset;
                eval(&work)
            };
            let h = opts.eps;
            let d1 = at(h)? - at(-h)?;
            let d2 = at(2.0 * h)? - at(-2.0 * h)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (8.0 * d1 - d2) / (12.0 * h);
            let a = grad.data()[ei];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > opts.tol {
                report.failures.push(GradFailure {
                    param: pi,
                    element: ei,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Random token-level bundles for `cfg`, half of the tokens masked. The
/// strong views are independent draws.
pub fn synthetic_bundles(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<ViewBundle>> {
    let e = &cfg.encoder;
    let shape = [e.n_tokens, e.patch_voxels];
    (0..n as u64)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, &[tag::PRETRAIN_DATA, i]));
            let mut draw = || Tensor::randn(&shape, 1.0, &mut rng);
            let (q_tokens, q_strong, k_tokens, k_strong) = (draw(), draw(), draw(), draw());
            Ok(ViewBundle {
                q_target: normalize_targets(&q_tokens),
                k_target: normalize_targets(&k_tokens),
                mask_u: mask_random(e.n_tokens, 0.5, seed::derive(seed, &[tag::MASK, i, 0]))?,
                mask_r: mask_random(e.n_tokens, 0.5, seed::derive(seed, &[tag::MASK, i, 1]))?,
                q_tokens,
                q_strong,
                k_tokens,
                k_strong,
            })
        })
        .collect()
}

/// Per-parameter outcome of [`model_grad_check`].
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

impl ModelGradCheck {
    /// Names of the parameters with at least one failing element.
    pub fn failing_params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .report
            .failures
            .iter()
            .map(|f| self.names[f.param].as_str())
            .collect();
        out.dedup();
        out
    }
}

/// Checks the gradient of the full training objective with respect to every
/// online parameter of a freshly initialised model. The target branch is
/// perturbed away from the online branch first so that the two differ.
pub fn model_grad_check(
    cfg: &ModelConfig,
    flags: AblationFlags,
    seed: u64,
    n_bundles: usize,
    opts: GradCheckOptions,
) -> Result<ModelGradCheck> {
    let mut state = ModelState::init(cfg, seed)?;
    let mut rng = seed::rng(seed::derive(seed, &[tag::INIT, tag::AUGMENT]));
    for t in state.target.values_mut() {
        let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let bundles = synthetic_bundles(cfg, n_bundles, seed)?;
    let names: Vec<String> = state.online.keys().cloned().collect();
    let values: Vec<Tensor> = state.online.values().cloned().collect();
    let report = grad_check(
        |g, vars| {
            let online = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let target = Bound::constants(g, &state.target);
            let obj = objective(
                g,
                &online,
                &target,
                cfg,
                &bundles,
                flags,
                LossWeights::default(),
                DEFAULT_TAU,
            )?;
            Ok(obj.total)
        },
        &values,
        opts,
    )?;
    Ok(ModelGradCheck { names, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let report = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            },
            &[Tensor::vector(&[1.0, 2.0])],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn cosine_of_two_learnable_vectors_passes() {
        let a = Tensor::from_rows(&[vec![0.3, -1.1, 2.0], vec![1.0, 0.5, -0.2]]).unwrap();
        let b = Tensor::from_rows(&[vec![-0.4, 0.9, 1.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let report = grad_check(
            |g, p| crate::losses::cosine_loss_between(g, p[0], p[1]),
            &[a, b],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn detached_factor_is_held_fixed() {
        // d/dx sum(x * stop(x)) with stop(x) frozen is x, not 2x.
        let report = grad_check(
            |g, p| {
                let d = g.detach(p[0]);
                let sq = g.mul(p[0], d)?;
                g.sum(sq)
            },
            &[Tensor::vector(&[1.0, 2.0])],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // The first (analytic) call builds x^2, later calls 2x^2.
        let calls = std::cell::Cell::new(0);
        let report = grad_check(
            |g, p| {
                calls.set(calls.get() + 1);
                let sq = g.mul(p[0], p[0])?;
                let sq = if calls.get() > 1 { g.scale(sq, 2.0)? } else { sq };
                g.sum(sq)
            },
            &[Tensor::vector(&[1.0, 2.0])],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 2);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = grad_check(
            |g, p| {
                let l = g.l2_normalize(p[0], None)?;
                g.sum(l)
            },
            &[Tensor::vector(&[0.0, 0.0])],
            GradCheckOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn micro_model_passes() {
        let c = model_grad_check(&ModelConfig::micro(), AblationFlags::default(), 0, 2, GradCheckOptions::default())
            .unwrap();
        assert!(c.report.passed(), "{:?}", c.failing_params());
        assert_eq!(c.report.checked, ModelState::init(&ModelConfig::micro(), 0).unwrap().online_param_count());
    }
}
