//! Acceptance checks, one line per criterion.
//!
//! Criteria 1-4, 6 and 9 are exact or property checks and fail the run.
//! Criteria 5, 7 and 8 are empirical directions measured at desk scale; they
//! are reported but only fail the run when `ALICE_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use alice::autodiff::Graph;
use alice::config::Config;
use alice::data::{MaskSpec, ViewBundle};
use alice::eval::ablation::run_cell;
use alice::eval::metrics::{auc_score, dice_score, nsd_score};
use alice::eval::report::std_dev;
use alice::eval::{finetune_seg, EncoderInit};
use alice::gradcheck::{model_grad_check, synthetic_bundles, GradCheckOptions};
use alice::losses::{inter_volume_loss, intra_volume_loss, objective, recon_loss, AblationFlags, LossKind, LossWeights};
use alice::model::{
    casa_align, decode_full, encode_target, encode_visible, global_cls, project_head, Bound, ModelConfig, ModelState,
    LN_EPS,
};
use alice::seed;
use alice::tensor::Tensor;
use alice::train::{ema_momentum, pretrain_run, read_loss_csv, train_step, AdamState, Checkpoint, PairSource, RunOptions};
use rand::Rng;

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CASA_TOL: f64 = 1e-10;
const CASA_INSTANCES: u64 = 20;
const CASA_BUDGET: Duration = Duration::from_secs(10);
const MASKED_BUNDLES: usize = 10;
const EMA_STEPS: usize = 5;
const EMA_TOL: f64 = 1e-15;
const LOSS_DROP: f64 = 0.30;
const PRETRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const NSD_TOL: f64 = 1e-12;
const METRIC_INSTANCES: u64 = 50;
const DOWNSTREAM_SEEDS: u64 = 5;
const LOSS_KIND_GAP: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let opts = GradCheckOptions {
        tol: GRAD_TOL,
        ..GradCheckOptions::default()
    };
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for s in 0..GRAD_SEEDS {
        match model_grad_check(&ModelConfig::micro(), AblationFlags::default(), s, 2, opts) {
            Ok(c) => {
                checked += c.report.checked;
                worst = worst.max(c.report.max_rel_err);
                failing.extend(c.failing_params().into_iter().map(|p| format!("seed {s}: {p}")));
            }
            Err(e) => failing.push(format!("seed {s}: {e}")),
        }
    }
    let took = t0.elapsed();
    outcome(
        failing.is_empty() && took < GRAD_BUDGET,
        format!(
            "{GRAD_SEEDS} seeds, {checked} elements, max rel err {worst:.2e} (tol {GRAD_TOL:e}), {:.1}s (budget {}s){}",
            took.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failing.is_empty() { String::new() } else { format!("; failing {failing:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn layer_norm_rows(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn mat_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn times(a: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().zip(w).map(|(x, wr)| x * wr[j]).sum())
                .collect()
        })
        .collect()
}

/// Naive single-head cross-attention with layer norms and output projection.
fn casa_oracle(p: &BTreeMap<String, Tensor>, query: &[Vec<f64>], source: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let v = |k: &str| p[k].data().to_vec();
    let qn = layer_norm_rows(query, &v("casa.ln_q.g"), &v("casa.ln_q.b"));
    let sn = layer_norm_rows(source, &v("casa.ln_kv.g"), &v("casa.ln_kv.b"));
    let q = times(&qn, &mat_rows(&p["casa.wq"]));
    let k = times(&sn, &mat_rows(&p["casa.wk"]));
    let nu = times(&sn, &mat_rows(&p["casa.wv"]));
    let c = q[0].len() as f64;
    let mut att = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / c.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        att.push(e.iter().map(|x| x / z).collect::<Vec<f64>>());
    }
    let mixed: Vec<Vec<f64>> = att
        .iter()
        .map(|a| {
            (0..nu[0].len())
                .map(|j| a.iter().zip(&nu).map(|(w, r)| w * r[j]).sum())
                .collect()
        })
        .collect();
    let zb = v("casa.zeta.b");
    let out = times(&mixed, &mat_rows(&p["casa.zeta.w"]))
        .into_iter()
        .map(|r| r.iter().zip(&zb).map(|(x, b)| x + b).collect())
        .collect();
    (att, out)
}

fn casa_equivalence() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::micro();
    let (n_m, n) = (3, 4);
    let mut worst: f64 = 0.0;
    let mut row_sum_err: f64 = 0.0;
    for inst in 0..CASA_INSTANCES {
        let mut rng = seed::rng(seed::derive(900, &[inst]));
        let state = ModelState::init(&cfg, inst).expect("micro init");
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, t) in state.online.iter().filter(|(k, _)| k.starts_with("casa.")) {
            params.insert(k.clone(), Tensor::randn(t.shape(), 0.7, &mut rng));
        }
        let query = Tensor::randn(&[n_m, cfg.encoder.embed_dim], 1.0, &mut rng);
        let source = Tensor::randn(&[n, cfg.head_out], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = Bound::params(&mut g, &params);
        let (qv, sv) = (g.constant(query.clone()), g.constant(source.clone()));
        let got = casa_align(&mut g, &p, qv, sv).expect("casa");
        let (att, out) = casa_oracle(&params, &mat_rows(&query), &mat_rows(&source));
        for (r, row) in att.iter().enumerate() {
            let a = g.value(got.att).row(r);
            row_sum_err = row_sum_err.max((a.iter().sum::<f64>() - 1.0).abs());
            for (j, x) in row.iter().enumerate() {
                worst = worst.max((a[j] - x).abs());
            }
        }
        for (r, row) in out.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                worst = worst.max((g.value(got.out).row(r)[j] - x).abs());
            }
        }
    }
    let took = t0.elapsed();
    outcome(
        worst <= CASA_TOL && row_sum_err <= CASA_TOL && took < CASA_BUDGET,
        format!(
            "{CASA_INSTANCES} instances (N_m=3, N=4, C=8), max |diff| {worst:.2e}, max |row sum - 1| {row_sum_err:.2e} (tol {CASA_TOL:e}), {:.2}s",
            took.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn loss_bits(state: &ModelState, bundles: &[ViewBundle], flags: AblationFlags) -> [u64; 4] {
    let mut g = Graph::new();
    let (online, target) = state.bind(&mut g);
    let o = objective(&mut g, &online, &target, &state.config, bundles, flags, LossWeights::default(), 0.2)
        .expect("objective");
    [o.l_r, o.l_dv, o.l_st, o.total].map(|v| g.value(v).item().to_bits())
}

fn scramble_masked(t: &mut Tensor, mask: &MaskSpec, rng: &mut impl Rng) {
    let c = t.cols();
    for &r in &mask.masked {
        for v in &mut t.data_mut()[r * c..(r + 1) * c] {
            *v = rng.gen_range(-50.0..50.0);
        }
    }
}

fn masked_only_contract() -> Outcome {
    let cfg = Config::preset("desk").expect("desk");
    let grid = cfg.data.grid().expect("grid");
    let source = PairSource::new(&cfg, 77).expect("source");
    let mut changed = Vec::new();
    let mut n = 0;
    for i in 0..MASKED_BUNDLES {
        let state = ModelState::init(&cfg.model, i as u64).expect("init");
        let bundles = source.batch(i + 1, &grid).expect("batch");
        let bundle = vec![bundles[0].clone()];
        let mut rng = seed::rng(seed::derive(31, &[i as u64]));
        let mut perturbed = bundle.clone();
        let b = &mut perturbed[0];
        scramble_masked(&mut b.q_tokens, &b.mask_u, &mut rng);
        scramble_masked(&mut b.k_tokens, &b.mask_r, &mut rng);
        for flags in [
            AblationFlags::default(),
            AblationFlags {
                use_casa: false,
                ..AblationFlags::default()
            },
        ] {
            n += 1;
            if loss_bits(&state, &bundle, flags) != loss_bits(&state, &perturbed, flags) {
                changed.push(format!("bundle {i} casa={}", flags.use_casa));
            }
        }
    }
    outcome(
        changed.is_empty(),
        format!("{MASKED_BUNDLES} bundles x 2 CASA settings ({n} comparisons), terms bitwise equal; changed: {changed:?}"),
    )
}

// ---------------------------------------------------------------- 4

/// The same objective assembled by hand with the teacher CASA inputs and
/// weights passed as plain constants instead of detached nodes.
fn hand_objective_grads(state: &ModelState, b: &ViewBundle) -> BTreeMap<String, Tensor> {
    let cfg = &state.config;
    let mut g = Graph::new();
    let (online, target) = state.bind(&mut g);
    let casa: BTreeMap<String, Tensor> = state
        .online
        .iter()
        .filter(|(k, _)| k.starts_with("casa."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let teacher = Bound::constants(&mut g, &casa);
    let mut side = |tokens: &Tensor, mask: &MaskSpec, strong: &Tensor| {
        let x = g.constant(tokens.clone());
        let v = encode_visible(&mut g, &online, cfg, x, mask).unwrap();
        let (feat, pred) = decode_full(&mut g, &online, cfg, v, mask).unwrap();
        let h = project_head(&mut g, &online, feat).unwrap();
        let xs = g.constant(strong.clone());
        let yt = encode_target(&mut g, &target, cfg, xs).unwrap();
        let y = project_head(&mut g, &target, yt).unwrap();
        let y = g.constant(g.value(y).clone());
        let cls_h = global_cls(&mut g, h).unwrap();
        let cls_y = global_cls(&mut g, y).unwrap();
        let s = casa_align(&mut g, &online, v, h).unwrap().out;
        let vc = g.constant(g.value(v).clone());
        let t = casa_align(&mut g, &teacher, vc, y).unwrap().out;
        (pred, cls_h, cls_y, s, t)
    };
    let q = side(&b.q_tokens, &b.mask_u, &b.q_strong);
    let k = side(&b.k_tokens, &b.mask_r, &b.k_strong);
    let lr = recon_loss(&mut g, &[(q.0, &b.q_target, &b.mask_u), (k.0, &b.k_target, &b.mask_r)]).unwrap();
    let ldv = inter_volume_loss(&mut g, q.1, k.2, k.1, q.2).unwrap();
    let lst = intra_volume_loss(&mut g, q.3, q.4, k.3, k.4).unwrap();
    let lr = g.scale(lr, 1.0).unwrap();
    let ldv = g.scale(ldv, 1.0).unwrap();
    let lst = g.scale(lst, 1.0).unwrap();
    let lr = g.scale(lr, 1.0).unwrap();
    let ldv = g.scale(ldv, 1.0).unwrap();
    let lst = g.scale(lst, 1.0).unwrap();
    let total = g.add(lr, ldv).unwrap();
    let total = g.add(total, lst).unwrap();
    let grads = g.backward(total).unwrap();
    online
        .iter()
        .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, g.value(v))))
        .collect()
}

fn ema_and_stop_gradient() -> Outcome {
    let model = ModelConfig::micro();
    let mut cfg = Config::preset("desk").expect("desk");
    cfg.model = model.clone();
    let mut notes = Vec::new();

    // Stop-gradient: no gradient reaches target parameters or teacher
    // tensors, and the online gradient equals the hand-built constant-teacher
    // graph bitwise.
    let mut state = ModelState::init(&model, 5).expect("init");
    let bundles = synthetic_bundles(&model, 1, 5).expect("bundles");
    let mut g = Graph::new();
    let (online, target) = state.bind(&mut g);
    let obj = objective(&mut g, &online, &target, &model, &bundles, AblationFlags::default(), LossWeights::default(), 0.2)
        .expect("objective");
    let grads = g.backward(obj.total).expect("backward");
    let mut leaked = 0;
    for (_, &v) in target.iter() {
        leaked += grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)) as usize;
    }
    for f in &obj.forwards {
        for br in [f.q, f.k] {
            for v in [Some(br.y), Some(br.cls_y), br.t, br.att_t].into_iter().flatten() {
                leaked += grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)) as usize;
            }
        }
    }
    if leaked > 0 {
        notes.push(format!("{leaked} target/teacher tensors received gradient"));
    }
    let hand = hand_objective_grads(&state, &bundles[0]);
    let mut differ = 0;
    for (k, &v) in online.iter() {
        if grads.get_or_zeros(v, g.value(v)) != hand[k] {
            differ += 1;
        }
    }
    if differ > 0 {
        notes.push(format!("{differ} online gradients differ from the constant-teacher graph"));
    }

    // EMA exactness across several steps.
    let mut adam = AdamState::new(&state.online);
    let mut worst: f64 = 0.0;
    let mut formula_mismatch = 0;
    for step in 1..=EMA_STEPS {
        let before = state.target.clone();
        let batch = synthetic_bundles(&model, 2, 100 + step as u64).expect("bundles");
        train_step(&mut state, &mut adam, &batch, &cfg, step).expect("step");
        let m = ema_momentum(step, cfg.optim.total_steps, cfg.train.ema_momentum, cfg.train.ema_schedule);
        for (k, t_new) in &state.target {
            let t_old = &before[k];
            let o = &state.online[k];
            for ((&tn, &to), &ov) in t_new.data().iter().zip(t_old.data()).zip(o.data()) {
                if tn.to_bits() != (m * to + (1.0 - m) * ov).to_bits() {
                    formula_mismatch += 1;
                }
                let scale = to.abs().max(ov.abs()).max(1.0);
                worst = worst.max(((tn - to) - (1.0 - m) * (ov - to)).abs() / scale);
            }
        }
    }
    if formula_mismatch > 0 {
        notes.push(format!("{formula_mismatch} target elements off the EMA formula"));
    }
    let ema_ok = worst <= EMA_TOL;
    outcome(
        notes.is_empty() && ema_ok,
        format!(
            "no gradient on target/teacher tensors, online grads bitwise equal to constant-teacher graph; {EMA_STEPS} steps, target == m*t + (1-m)*o bitwise, max |dt - (1-m)(o-t)| {worst:.1e} (tol {EMA_TOL:e}){}",
            if notes.is_empty() { String::new() } else { format!("; {notes:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 5

fn optimization_sanity(cfg: &Config) -> (Outcome, Option<ModelState>) {
    let dir = tempfile::tempdir().expect("tempdir");
    let t0 = Instant::now();
    let every = cfg.optim.total_steps / 4;
    let progress = |r: &alice::losses::LossReport| {
        if r.step % every == 0 {
            eprintln!("  pretrain step {} total {:.4} ({:.0}s)", r.step, r.total, t0.elapsed().as_secs_f64());
        }
    };
    let run = pretrain_run(
        cfg,
        &RunOptions {
            out_dir: Some(dir.path()),
            on_step: Some(&progress),
            ..RunOptions::default()
        },
    );
    let took = t0.elapsed();
    let run = match run {
        Ok(r) => r,
        Err(e) => return (outcome(false, format!("pretraining failed: {e}")), None),
    };
    let rows = read_loss_csv(&dir.path().join("losses.csv")).expect("csv");
    let w = rows.len() / 10;
    let mean = |r: &[alice::losses::LossReport]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let first = mean(&rows[..w]);
    let last = mean(&rows[rows.len() - w..]);
    let drop = (first - last) / first.abs();
    let l_r_first = rows[..w].iter().map(|x| x.l_r).sum::<f64>() / w as f64;
    let l_r_last = rows[rows.len() - w..].iter().map(|x| x.l_r).sum::<f64>() / w as f64;
    let pass = rows.len() == cfg.optim.total_steps && drop >= LOSS_DROP && took < PRETRAIN_BUDGET;
    (
        outcome(
            pass,
            format!(
                "{} rows; mean total first 10% {first:.4}, last 10% {last:.4}, drop {:.1}% of |first| (need {:.0}%); l_r {l_r_first:.4} -> {l_r_last:.4}; {:.0}s (budget {}s)",
                rows.len(),
                100.0 * drop,
                100.0 * LOSS_DROP,
                took.as_secs_f64(),
                PRETRAIN_BUDGET.as_secs()
            ),
        ),
        Some(run.state),
    )
}

// ---------------------------------------------------------------- 6

fn random_mask(rng: &mut impl Rng, kind: u64) -> Vec<u8> {
    let n = 16;
    let mut m = vec![0u8; n * n * n];
    match kind % 4 {
        0 => {
            let p = rng.gen_range(0.05..0.5);
            for v in &mut m {
                *v = rng.gen_bool(p) as u8;
            }
        }
        1 | 2 => {
            for _ in 0..rng.gen_range(1..4) {
                let c: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(0.0..16.0));
                let r = rng.gen_range(1.5..6.0);
                for x in 0..n {
                    for y in 0..n {
                        for z in 0..n {
                            let d = [x, y, z].iter().zip(c).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>();
                            if d <= r * r {
                                m[(x * n + y) * n + z] = 1;
                            }
                        }
                    }
                }
            }
        }
        _ => {
            if rng.gen_bool(0.5) {
                let i = rng.gen_range(0..m.len());
                m[i] = 1;
            }
        }
    }
    m
}

fn surface_points(m: &[u8]) -> Vec<[i64; 3]> {
    let n = 16i64;
    let at = |x: i64, y: i64, z: i64| {
        (0..n).contains(&x) && (0..n).contains(&y) && (0..n).contains(&z) && m[((x * n + y) * n + z) as usize] == 1
    };
    let mut out = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if at(x, y, z)
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|(a, b, c)| !at(x + a, y + b, z + c))
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn nsd_oracle(a: &[u8], b: &[u8], tol: f64) -> f64 {
    let (sa, sb) = (surface_points(a), surface_points(b));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let near = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .filter(|p| {
                to.iter()
                    .any(|q| ((p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)) as f64 <= tol * tol)
            })
            .count()
    };
    (near(&sa, &sb) + near(&sb, &sa)) as f64 / (sa.len() + sb.len()) as f64
}

fn dice_oracle(a: &[u8], b: &[u8]) -> f64 {
    let na = a.iter().filter(|&&v| v == 1).count();
    let nb = b.iter().filter(|&&v| v == 1).count();
    let both = a.iter().zip(b).filter(|(&x, &y)| x == 1 && y == 1).count();
    if na + nb == 0 {
        1.0
    } else {
        (2 * both) as f64 / (na + nb) as f64
    }
}

fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0u64;
    let (mut np, mut nn) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            num += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    num as f64 / (2 * np * nn) as f64
}

fn metric_oracles() -> Outcome {
    let ext = [16, 16, 16];
    let mut fails = Vec::new();
    let mut worst_nsd: f64 = 0.0;
    for i in 0..METRIC_INSTANCES {
        let mut rng = seed::rng(seed::derive(600, &[i]));
        let a = random_mask(&mut rng, i);
        let b = random_mask(&mut rng, i / 4 + 1);
        let tol = [0.0, 1.0, 1.5, 2.0, 3.0][(i % 5) as usize];
        let d = dice_score(&a, &b, 1).unwrap();
        if d != dice_oracle(&a, &b) || d != dice_score(&b, &a, 1).unwrap() {
            fails.push(format!("dsc instance {i}"));
        }
        let s = nsd_score(&a, &b, ext, 1, tol).unwrap();
        let err = (s - nsd_oracle(&a, &b, tol)).abs();
        worst_nsd = worst_nsd.max(err);
        if err > NSD_TOL || s != nsd_score(&b, &a, ext, 1, tol).unwrap() {
            fails.push(format!("nsd instance {i}"));
        }
    }
    for i in 0..METRIC_INSTANCES {
        let mut rng = seed::rng(seed::derive(700, &[i]));
        let n = rng.gen_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64 / 11.0).collect();
        let got = auc_score(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) * 5.0 - 2.0).collect();
        if got != auc_oracle(&scores, &labels) || got != auc_score(&cubed, &labels).unwrap() {
            fails.push(format!("auc instance {i}"));
        }
    }

    // Hand examples.
    let mut hand = Vec::new();
    let four = |idx: &[usize]| {
        let mut m = vec![0u8; 8];
        for &i in idx {
            m[i] = 1;
        }
        m
    };
    hand.push(("dsc identical", dice_score(&four(&[0, 1]), &four(&[0, 1]), 1).unwrap() == 1.0));
    hand.push(("dsc disjoint", dice_score(&four(&[0, 1]), &four(&[2, 3]), 1).unwrap() == 0.0));
    hand.push(("dsc overlap 2 of 4", dice_score(&four(&[0, 1, 2, 3]), &four(&[2, 3, 4, 5]), 1).unwrap() == 0.5));
    hand.push(("dsc both empty", dice_score(&four(&[]), &four(&[]), 1).unwrap() == 1.0));
    let mut rng = seed::rng(5);
    let blob = random_mask(&mut rng, 1);
    let other = random_mask(&mut rng, 2);
    hand.push(("nsd identical", nsd_score(&blob, &blob, ext, 1, 0.0).unwrap() == 1.0));
    hand.push(("nsd tol beyond diagonal", nsd_score(&blob, &other, ext, 1, 28.0).unwrap() == 1.0));
    let mut cube = vec![0u8; 16 * 16 * 16];
    let mut shifted = cube.clone();
    for x in 4..8 {
        for y in 4..8 {
            for z in 4..8 {
                cube[(x * 16 + y) * 16 + z] = 1;
                shifted[((x + 1) * 16 + y) * 16 + z] = 1;
            }
        }
    }
    hand.push(("nsd cube shift tol 1", nsd_score(&cube, &shifted, ext, 1, 1.0).unwrap() == 1.0));
    hand.push((
        "nsd cube shift tol 0",
        (nsd_score(&cube, &shifted, ext, 1, 0.0).unwrap() - nsd_oracle(&cube, &shifted, 0.0)).abs() <= NSD_TOL,
    ));
    hand.push((
        "auc worked example",
        auc_score(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap() == 0.75,
    ));
    hand.push(("auc separated", auc_score(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap() == 1.0));
    hand.push(("auc all tied", auc_score(&[0.3; 4], &[false, true, false, true]).unwrap() == 0.5));
    hand.push(("auc single class rejected", auc_score(&[0.1, 0.2], &[true, true]).is_err()));
    let bad: Vec<&str> = hand.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        fails.is_empty() && bad.is_empty(),
        format!(
            "{METRIC_INSTANCES} mask pairs (DSC exact, max NSD err {worst_nsd:.1e}, tol {NSD_TOL:e}), {METRIC_INSTANCES} AUC sets exact, {} hand examples; failures {fails:?} {bad:?}",
            hand.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn downstream_gain(cfg: &Config, pretrained: Option<&ModelState>) -> Outcome {
    let Some(state) = pretrained else {
        return outcome(false, "no pretrained model (criterion 5 failed to run)");
    };
    let mut diffs = Vec::new();
    let mut pre = Vec::new();
    let mut rand = Vec::new();
    for k in 0..DOWNSTREAM_SEEDS {
        let s = cfg.train.seed + k;
        let a = finetune_seg(cfg, EncoderInit::Pretrained(state), s).expect("pretrained finetune").mean_dsc;
        let b = finetune_seg(cfg, EncoderInit::Random, s).expect("random finetune").mean_dsc;
        pre.push(a);
        rand.push(b);
        diffs.push(a - b);
    }
    let d = mean(&diffs);
    outcome(
        d >= 0.0,
        format!(
            "{DOWNSTREAM_SEEDS} paired seeds: pretrained DSC {:.4} (std {:.4}), random {:.4} (std {:.4}), mean diff {d:+.4} (std {:.4}); per seed {diffs:.4?}",
            mean(&pre),
            std_dev(&pre),
            mean(&rand),
            std_dev(&rand),
            std_dev(&diffs)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ablation_directions(cfg: &Config) -> Outcome {
    let base = AblationFlags::default();
    let cells = [
        ("baseline", base),
        ("no l_dv", AblationFlags { use_ldv: false, ..base }),
        ("no CASA", AblationFlags { use_casa: false, ..base }),
        ("InfoNCE", AblationFlags { loss_kind: LossKind::InfoNce, ..base }),
    ];
    let mut rows = Vec::new();
    for (name, flags) in cells {
        match run_cell(cfg, flags, &|line| eprintln!("  {line}")) {
            Ok(r) => rows.push((name, r)),
            Err(e) => return outcome(false, format!("cell {name} failed: {e}")),
        }
    }
    let m = |i: usize| rows[i].1.dsc_mean();
    let ldv = m(0) - m(1);
    let casa = m(0) - m(2);
    let kind = (m(0) - m(3)).abs();
    let summary: Vec<String> = rows
        .iter()
        .map(|(n, r)| format!("{n} {:.4}±{:.4}", r.dsc_mean(), std_dev(&r.dsc)))
        .collect();
    outcome(
        ldv >= 0.0 && casa >= 0.0 && kind < LOSS_KIND_GAP,
        format!(
            "{} seeds x {} pretrain steps per cell: {}; with-minus-without l_dv {ldv:+.4}, CASA {casa:+.4}, |cosine - InfoNCE| {kind:.4} (need < {LOSS_KIND_GAP})",
            cfg.ablate.n_seeds,
            cfg.ablate.pretrain_steps,
            summary.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn reproducibility() -> Outcome {
    let mut cfg = Config::preset("desk").expect("desk");
    cfg.optim.total_steps = 20;
    cfg.optim.warmup_steps = 5;
    cfg.train.checkpoint_every = 10;
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    fn opts(d: &std::path::Path) -> RunOptions<'_> {
        RunOptions {
            out_dir: Some(d),
            ..RunOptions::default()
        }
    }
    let straight = pretrain_run(&cfg, &opts(a.path())).expect("straight run");
    pretrain_run(
        &cfg,
        &RunOptions {
            stop_after: Some(10),
            ..opts(b.path())
        },
    )
    .expect("first half");
    let resumed = pretrain_run(
        &cfg,
        &RunOptions {
            resume: Some(&b.path().join("checkpoint-10.bin")),
            ..opts(b.path())
        },
    )
    .expect("resumed half");
    pretrain_run(&cfg, &opts(c.path())).expect("repeat run");

    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    let mut notes = Vec::new();
    if read(&a, "losses.csv") != read(&b, "losses.csv") {
        notes.push("resumed losses.csv differs");
    }
    if read(&a, "checkpoint-20.bin") != read(&b, "checkpoint-20.bin") || straight.state != resumed.state {
        notes.push("resumed final state differs");
    }
    if read(&a, "losses.csv") != read(&c, "losses.csv") {
        notes.push("repeat losses.csv differs");
    }
    let loaded = Checkpoint::load(&a.path().join("checkpoint-20.bin"), &cfg.model).expect("load");
    if loaded.state != straight.state || loaded.adam != straight.adam {
        notes.push("checkpoint roundtrip differs");
    }
    outcome(
        notes.is_empty(),
        format!("20 steps straight vs 10 + resume 10, and a repeat run: losses.csv and checkpoints byte-identical; {notes:?}"),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var("ALICE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let desk = Config::preset("desk").expect("desk");
    let mut results: Vec<(u32, bool, Outcome)> = Vec::new();
    let mut report = |n: u32, gating: bool, o: Outcome| {
        println!(
            "criterion {n}: {} {}{}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            if gating { "" } else { " [reported]" }
        );
        results.push((n, gating, o));
    };
    report(1, true, gradient_integrity());
    report(2, true, casa_equivalence());
    report(3, true, masked_only_contract());
    report(4, true, ema_and_stop_gradient());
    let (o5, pretrained) = optimization_sanity(&desk);
    report(5, false, o5);
    report(6, true, metric_oracles());
    report(7, false, downstream_gain(&desk, pretrained.as_ref()));
    report(8, false, ablation_directions(&desk));
    report(9, true, reproducibility());

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, gating, o)| !o.pass && (*gating || strict))
        .map(|(n, _, _)| *n)
        .collect();
    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
