//! Toy downstream tasks: phantom segmentation with a light upsampling head
//! and a lesion classification probe.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc_score, dice_score, nsd_score};
use crate::autodiff::{Graph, Var};
use crate::config::Config;
use crate::data::phantom::insert_lesion;
use crate::data::{generate_instance, patchify, MaskSpec, PatchGrid, Volume};
use crate::error::{Error, Result};
use crate::model::layers::linear;
use crate::model::{encode_visible, global_cls, Bound, ModelConfig, ModelState, ParamSet};
use crate::seed::{self, tag};
use crate::tensor::Tensor;
use crate::train::{adamw_step, lr_schedule, AdamState, OptimizerConfig};

const CROP_RETRIES: u64 = 8;

/// Where the encoder weights of a downstream run come from.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInit<'a> {
    Random,
    Pretrained(&'a ModelState),
}

impl EncoderInit<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            EncoderInit::Random => "random",
            EncoderInit::Pretrained(_) => "pretrained",
        }
    }
}

/// Outcome of one downstream run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegResult {
    pub seed: u64,
    /// Mean over test cases of the DSC of organ classes `1..=L`.
    pub per_class_dsc: Vec<f64>,
    pub per_class_nsd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub final_train_loss: f64,
}

fn root_seed(seed: u64) -> u64 {
    seed::derive(seed, &[tag::FINETUNE_DATA])
}

/// Labelled crop `i` of the downstream pool under `root`, optionally with a
/// lesion in the organ it is centred on.
fn labelled_crop(cfg: &Config, root: u64, i: u64, lesion: Option<f64>) -> Result<Volume> {
    let d = &cfg.data;
    let pc = d.phantom_config();
    let mut last = None;
    for attempt in 0..CROP_RETRIES {
        let s = |t: u64| seed::derive(root, &[t, i, attempt]);
        let mut vol = match generate_instance(&pc, s(tag::ANATOMY), s(tag::DEFORM)) {
            Ok(v) => v,
            Err(e @ Error::Placement(_)) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut rng = seed::rng(s(tag::PICK));
        let organ = rng.gen_range(1..=d.n_organs as u8);
        if let Some(radius) = lesion {
            insert_lesion(&mut vol, organ, radius, s(tag::LESION))?;
        }
        let Some(c) = vol.organ_centroids().get(&organ).copied() else {
            continue;
        };
        let origin = [0, 1, 2].map(|a| {
            let spread = (d.crop[a] / 4) as i64;
            let start = c[a].round() as i64 - (d.crop[a] / 2) as i64 + rng.gen_range(-spread..=spread);
            start.clamp(0, (d.phantom[a] - d.crop[a]) as i64) as usize
        });
        return vol.crop(origin, d.crop);
    }
    Err(last.unwrap_or_else(|| Error::Placement(format!("no labelled crop for case {i}"))))
}

/// Flat voxel index of every output row of the segmentation head: tokens in
/// order, then the 2 x 2 x 2 sub-blocks of the patch, then the voxels of a
/// sub-block, each row-major.
pub fn seg_row_order(grid: &PatchGrid) -> Vec<usize> {
    let [_, ny, nz] = grid.volume;
    let sub = grid.patch.map(|p| p / 2);
    let mut out = Vec::with_capacity(grid.volume.iter().product());
    for t in 0..grid.n_tokens() {
        let c = grid.token_coords(t);
        let base = [0, 1, 2].map(|a| c[a] * grid.patch[a]);
        for sx in 0..2 {
            for sy in 0..2 {
                for sz in 0..2 {
                    for lx in 0..sub[0] {
                        for ly in 0..sub[1] {
                            for lz in 0..sub[2] {
                                let x = base[0] + sx * sub[0] + lx;
                                let y = base[1] + sy * sub[1] + ly;
                                let z = base[2] + sz * sub[2] + lz;
                                out.push((x * ny + y) * nz + z);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

/// Encoder parameters for a downstream run, checked against `model`.
fn encoder_params(model: &ModelConfig, init: EncoderInit, seed: u64) -> Result<ParamSet> {
    let fresh = ModelState::init(model, seed::derive(seed, &[tag::FINETUNE_DATA, tag::INIT]))?;
    let enc = |set: &ParamSet| -> ParamSet {
        set.iter()
            .filter(|(k, _)| k.starts_with("enc."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let want = enc(&fresh.online);
    match init {
        EncoderInit::Random => Ok(want),
        EncoderInit::Pretrained(state) => {
            let got = enc(&state.online);
            for (k, t) in &want {
                match got.get(k) {
                    Some(g) if g.shape() == t.shape() => {}
                    _ => {
                        return Err(Error::Mismatch(format!(
                            "pretrained encoder lacks {k} with shape {:?}",
                            t.shape()
                        )))
                    }
                }
            }
            if got.len() != want.len() {
                return Err(Error::Mismatch("pretrained encoder has extra parameters".into()));
            }
            Ok(got)
        }
    }
}

/// Encoder plus segmentation head:
/// token features -> Linear(D, 8h) -> GELU -> one row per sub-block ->
/// Linear(h, voxels-per-sub-block x (L + 1)) -> one row per voxel.
struct SegModel {
    model: ModelConfig,
    grid: PatchGrid,
    n_classes: usize,
    hidden: usize,
    params: ParamSet,
}

impl SegModel {
    fn new(cfg: &Config, init: EncoderInit, seed: u64) -> Result<Self> {
        let grid = cfg.data.grid()?;
        let model = cfg.model.clone();
        let mut params = encoder_params(&model, init, seed)?;
        let h = cfg.finetune.seg_hidden;
        let n_classes = cfg.data.n_organs + 1;
        let per_sub = grid.patch_voxels() / 8;
        let mut rng = seed::rng(seed::derive(seed, &[tag::HEAD_INIT]));
        let d = model.encoder.embed_dim;
        params.insert("seg.up.w".into(), xavier(d, 8 * h, &mut rng));
        params.insert("seg.up.b".into(), Tensor::zeros(&[8 * h]));
        params.insert("seg.out.w".into(), xavier(h, per_sub * n_classes, &mut rng));
        params.insert("seg.out.b".into(), Tensor::zeros(&[per_sub * n_classes]));
        Ok(SegModel {
            model,
            grid,
            n_classes,
            hidden: h,
            params,
        })
    }

    /// Per-voxel logits in [`seg_row_order`].
    fn logits(&self, g: &mut Graph, p: &Bound, tokens: &Tensor) -> Result<Var> {
        let x = g.constant(tokens.clone());
        let all = MaskSpec::none(self.grid.n_tokens());
        let f = encode_visible(g, p, &self.model, x, &all)?;
        let up = linear(g, p, "seg.up", f)?;
        let up = g.gelu(up)?;
        let up = g.reshape(up, &[self.grid.n_tokens() * 8, self.hidden])?;
        let out = linear(g, p, "seg.out", up)?;
        g.reshape(out, &[self.grid.n_tokens() * self.grid.patch_voxels(), self.n_classes])
    }
}

struct Case {
    tokens: Tensor,
    labels: Vec<u8>,
    /// Labels in head row order.
    row_labels: Vec<usize>,
}

fn seg_cases(cfg: &Config, root: u64, range: std::ops::Range<u64>, grid: &PatchGrid, order: &[usize]) -> Result<Vec<Case>> {
    range
        .map(|i| {
            let v = labelled_crop(cfg, root, i, None)?;
            let labels = v.labels().expect("phantoms carry labels").to_vec();
            Ok(Case {
                tokens: patchify(&v, grid)?,
                row_labels: order.iter().map(|&j| labels[j] as usize).collect(),
                labels,
            })
        })
        .collect()
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn downstream_optim(steps: usize, lr: f64, weight_decay: f64, warmup: usize) -> OptimizerConfig {
    OptimizerConfig {
        peak_lr: lr,
        warmup_steps: warmup,
        total_steps: steps,
        min_lr: 0.0,
        weight_decay,
        ..OptimizerConfig::default()
    }
}

fn grads_of(g: &Graph, p: &Bound, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let grads = g.backward(loss)?;
    Ok(p.iter()
        .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, g.value(v))))
        .collect())
}

/// Fine-tunes encoder and segmentation head with voxel cross-entropy, then
/// scores DSC and NSD on held-out crops.
///
/// Data, head initialisation and the random encoder all derive from `seed`,
/// so a random and a pretrained run with one seed differ only in the
/// encoder weights.
pub fn finetune_seg(cfg: &Config, init: EncoderInit, seed: u64) -> Result<SegResult> {
    cfg.validate()?;
    let f = &cfg.finetune;
    let mut net = SegModel::new(cfg, init, seed)?;
    let grid = net.grid;
    let order = seg_row_order(&grid);
    let root = root_seed(seed);
    let n_train = f.n_train as u64;
    let train = seg_cases(cfg, root, 0..n_train, &grid, &order)?;
    let test = seg_cases(cfg, root, n_train..n_train + f.n_test as u64, &grid, &order)?;

    let opt = downstream_optim(f.steps, f.lr, f.weight_decay, f.steps / 10);
    let mut adam = AdamState::new(&net.params);
    let mut last_loss = f64::NAN;
    for step in 1..=f.steps {
        let mut g = Graph::new();
        let p = Bound::params(&mut g, &net.params);
        let mut losses = Vec::with_capacity(f.batch_size);
        for b in 0..f.batch_size {
            let pick = seed::derive(root, &[tag::ORDER, step as u64, b as u64]) % n_train;
            let case = &train[pick as usize];
            let logits = net.logits(&mut g, &p, &case.tokens)?;
            losses.push(g.cross_entropy(logits, &case.row_labels)?);
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = g.add(loss, l)?;
        }
        let loss = g.scale(loss, 1.0 / f.batch_size as f64)?;
        last_loss = g.value(loss).item();
        let grads = grads_of(&g, &p, loss)?;
        adamw_step(&mut net.params, &grads, &mut adam, &opt, lr_schedule(step, &opt))?;
    }

    let n_classes = net.n_classes;
    let mut dsc = vec![0.0; n_classes - 1];
    let mut nsd = vec![0.0; n_classes - 1];
    for case in &test {
        let mut g = Graph::new();
        let p = Bound::constants(&mut g, &net.params);
        let logits = net.logits(&mut g, &p, &case.tokens)?;
        let mut pred = vec![0u8; case.labels.len()];
        for (r, k) in argmax_rows(g.value(logits)).into_iter().enumerate() {
            pred[order[r]] = k as u8;
        }
        for c in 1..n_classes {
            dsc[c - 1] += dice_score(&pred, &case.labels, c as u8)?;
            nsd[c - 1] += nsd_score(&pred, &case.labels, grid.volume, c as u8, f.nsd_tolerance)?;
        }
    }
    let nt = test.len() as f64;
    dsc.iter_mut().for_each(|v| *v /= nt);
    nsd.iter_mut().for_each(|v| *v /= nt);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SegResult {
        seed,
        mean_dsc: mean(&dsc),
        mean_nsd: mean(&nsd),
        per_class_dsc: dsc,
        per_class_nsd: nsd,
        final_train_loss: last_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsResult {
    pub seed: u64,
    pub auc: f64,
}

/// Linear probe on pooled frozen-encoder features separating crops with a
/// synthetic lesion from crops without; scored by ROC AUC.
pub fn finetune_cls(cfg: &Config, init: EncoderInit, seed: u64) -> Result<ClsResult> {
    cfg.validate()?;
    let f = &cfg.finetune;
    let grid = cfg.data.grid()?;
    let enc = encoder_params(&cfg.model, init, seed)?;
    let root = seed::derive(root_seed(seed), &[tag::LESION]);
    let n_total = (f.n_cls_train + f.n_cls_test) as u64;
    let mut feats = Vec::with_capacity(n_total as usize);
    let mut labels = Vec::with_capacity(n_total as usize);
    for i in 0..n_total {
        let positive = i % 2 == 1;
        let v = labelled_crop(cfg, root, i, positive.then_some(f.lesion_radius))?;
        let mut g = Graph::new();
        let p = Bound::constants(&mut g, &enc);
        let x = g.constant(patchify(&v, &grid)?);
        let h = encode_visible(&mut g, &p, &cfg.model, x, &MaskSpec::none(grid.n_tokens()))?;
        let pooled = global_cls(&mut g, h)?;
        feats.push(g.value(pooled).data().to_vec());
        labels.push(positive);
    }
    let d = cfg.model.encoder.embed_dim;
    let train_x = Tensor::from_rows(&feats[..f.n_cls_train])?;
    let train_y: Vec<usize> = labels[..f.n_cls_train].iter().map(|&l| l as usize).collect();
    let test_x = Tensor::from_rows(&feats[f.n_cls_train..])?;
    let test_y = &labels[f.n_cls_train..];

    let mut rng = seed::rng(seed::derive(seed, &[tag::HEAD_INIT, tag::LESION]));
    let mut params: ParamSet = BTreeMap::new();
    params.insert("probe.w".into(), xavier(d, 2, &mut rng));
    params.insert("probe.b".into(), Tensor::zeros(&[2]));
    let opt = downstream_optim(f.cls_steps, f.cls_lr, 0.0, 0);
    let mut adam = AdamState::new(&params);
    for step in 1..=f.cls_steps {
        let mut g = Graph::new();
        let p = Bound::params(&mut g, &params);
        let x = g.constant(train_x.clone());
        let logits = linear(&mut g, &p, "probe", x)?;
        let loss = g.cross_entropy(logits, &train_y)?;
        let grads = grads_of(&g, &p, loss)?;
        adamw_step(&mut params, &grads, &mut adam, &opt, lr_schedule(step, &opt))?;
    }
    let logits = test_x.matmul(&params["probe.w"])?;
    let b = params["probe.b"].data();
    let scores: Vec<f64> = (0..logits.rows())
        .map(|r| (logits.at2(r, 1) + b[1]) - (logits.at2(r, 0) + b[0]))
        .collect();
    Ok(ClsResult {
        seed,
        auc: auc_score(&scores, test_y)?,
    })
}
