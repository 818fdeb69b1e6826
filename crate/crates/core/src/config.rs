//! Run configuration: a flat `key = value` text format with dotted section
//! prefixes, and the built-in presets.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws* comment?
//! key     := section '.' name | 'preset'
//! ```
//!
//! Triples such as extents are written `48x48x32`. Booleans are `true` or
//! `false`. Unknown keys, duplicate keys and malformed values are errors.
//! A `preset` entry selects the base values the other entries override,
//! wherever it appears in the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PatchGrid, PhantomConfig};
use crate::error::{Error, Result};
use crate::losses::{AblationFlags, LossKind, LossWeights, DEFAULT_TAU};
use crate::model::{EncoderConfig, ModelConfig};
use crate::train::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaSchedule {
    Constant,
    /// `1 - (1 - m0) (cos(pi s / S) + 1) / 2`, reaching 1 at the last step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub phantom: [usize; 3],
    pub n_organs: usize,
    pub crop: [usize; 3],
    pub patch: [usize; 3],
    /// Maximum simulated landmark error, in voxels per axis.
    pub jitter: usize,
    /// Size of a fixed pool of crop pairs; 0 draws a fresh pair every time.
    pub n_pairs: usize,
    pub deform_amp: f64,
    pub noise_std: f64,
}

impl DataConfig {
    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            extents: self.phantom,
            n_organs: self.n_organs,
            deform_amp: self.deform_amp,
            noise_std: self.noise_std,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.crop, self.patch).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub ema_momentum: f64,
    pub ema_schedule: EmaSchedule,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub tau: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Per-term gradient norms in the loss report.
    pub diagnostics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub nsd_tolerance: f64,
    pub seg_hidden: usize,
    pub n_seeds: usize,
    pub cls_steps: usize,
    pub cls_lr: f64,
    pub n_cls_train: usize,
    pub n_cls_test: usize,
    pub lesion_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub n_seeds: usize,
    /// Pretraining steps per cell, identical across cells.
    pub pretrain_steps: usize,
}

/// Everything a command needs, after preset and overrides are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub preset: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub ablate: AblateConfig,
}

pub const PRESETS: [&str; 2] = ["desk", "paper-scale"];

fn desk() -> Config {
    let data = DataConfig {
        phantom: [48, 48, 32],
        n_organs: 3,
        crop: [32, 32, 16],
        patch: [8, 8, 16],
        jitter: 2,
        n_pairs: 0,
        deform_amp: 2.0,
        noise_std: 0.02,
    };
    Config {
        preset: "desk".into(),
        model: ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 32,
                depth: 2,
                heads: 4,
                mlp_ratio: 2,
                patch_voxels: 0,
                n_tokens: 0,
            },
            dec_dim: 16,
            dec_depth: 2,
            dec_heads: 2,
            head_hidden: 64,
            head_out: 32,
            casa_dim: 32,
            casa_shared: true,
        },
        data,
        optim: OptimizerConfig {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            min_lr: 1e-5,
            ..OptimizerConfig::default()
        },
        train: TrainConfig {
            batch_size: 4,
            mask_ratio: 0.75,
            ema_momentum: 0.996,
            ema_schedule: EmaSchedule::Cosine,
            flags: AblationFlags::default(),
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            seed: 0,
            checkpoint_every: 500,
            diagnostics: false,
        },
        finetune: FinetuneConfig {
            steps: 400,
            lr: 1e-2,
            weight_decay: 0.05,
            batch_size: 2,
            n_train: 32,
            n_test: 8,
            nsd_tolerance: 1.0,
            seg_hidden: 16,
            n_seeds: 5,
            cls_steps: 100,
            cls_lr: 1e-2,
            n_cls_train: 16,
            n_cls_test: 16,
            lesion_radius: 3.0,
        },
        ablate: AblateConfig {
            n_seeds: 5,
            pretrain_steps: 300,
        },
    }
}

fn paper_scale() -> Config {
    let mut c = desk();
    c.preset = "paper-scale".into();
    c.model.encoder.embed_dim = 768;
    c.model.encoder.depth = 12;
    c.model.encoder.heads = 12;
    c.model.encoder.mlp_ratio = 4;
    c.model.dec_dim = 384;
    c.model.dec_heads = 12;
    c.model.head_hidden = 4096;
    c.model.head_out = 256;
    c.model.casa_dim = 768;
    c.data.phantom = [256, 256, 96];
    c.data.n_organs = 8;
    c.data.crop = [192, 192, 64];
    c.data.patch = [16, 16, 16];
    c.data.jitter = 4;
    c.optim.peak_lr = 5e-5;
    c.optim.min_lr = 1e-6;
    c.optim.total_steps = 100_000;
    c.optim.warmup_steps = 5_000;
    c.train.batch_size = 8;
    c.train.checkpoint_every = 10_000;
    c.ablate.pretrain_steps = 20_000;
    c
}

impl Config {
    pub fn preset(name: &str) -> Result<Config> {
        let mut c = match name {
            "desk" => desk(),
            "paper-scale" => paper_scale(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        c.derive();
        Ok(c)
    }

    /// Fills the model fields that follow from the data geometry.
    fn derive(&mut self) {
        let voxels = self.data.patch.iter().product();
        let tokens = (0..3)
            .map(|a| self.data.crop[a] / self.data.patch[a].max(1))
            .product();
        self.model.encoder.patch_voxels = voxels;
        self.model.encoder.n_tokens = tokens;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.grid()?;
        self.model.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.mask_ratio) || crate::data::mask::masked_count(self.model.encoder.n_tokens, t.mask_ratio) == 0 {
            return Err(Error::Config(format!(
                "train.mask_ratio {} must mask at least one of {} tokens and keep one",
                t.mask_ratio, self.model.encoder.n_tokens
            )));
        }
        if crate::data::mask::masked_count(self.model.encoder.n_tokens, t.mask_ratio) >= self.model.encoder.n_tokens {
            return Err(Error::Config("train.mask_ratio leaves no visible token".into()));
        }
        if !(0.0..=1.0).contains(&t.ema_momentum) {
            return Err(Error::Config("train.ema_momentum outside [0, 1]".into()));
        }
        if t.flags.loss_kind == LossKind::InfoNce && t.batch_size < 2 {
            return Err(Error::Config("infonce needs train.batch_size >= 2".into()));
        }
        if !(t.tau > 0.0) {
            return Err(Error::Config("train.tau must be positive".into()));
        }
        let f = &self.finetune;
        if f.steps == 0 || f.batch_size == 0 || f.n_train == 0 || f.n_test == 0 || f.seg_hidden == 0 || f.n_seeds == 0 {
            return Err(Error::Config("finetune counts must be positive".into()));
        }
        if f.n_cls_train < 2 || f.n_cls_test < 2 {
            return Err(Error::Config("classification splits need at least 2 cases".into()));
        }
        if self.data.patch.iter().any(|p| p % 2 != 0) {
            return Err(Error::Config("data.patch extents must be even for the segmentation head".into()));
        }
        if self.ablate.n_seeds == 0 || self.ablate.pretrain_steps <= self.optim.warmup_steps {
            return Err(Error::Config(
                "ablate.n_seeds must be positive and ablate.pretrain_steps above optim.warmup_steps".into(),
            ));
        }
        Ok(())
    }

    /// Applies `key = value` text on top of the preset it names (default
    /// `desk`).
    pub fn parse(text: &str) -> Result<Config> {
        Self::parse_with_default(text, "desk")
    }

    pub fn parse_with_default(text: &str, default_preset: &str) -> Result<Config> {
        let entries = parse_entries(text)?;
        let preset = entries
            .iter()
            .find(|(k, _, _)| k == "preset")
            .map(|(_, v, _)| v.as_str())
            .unwrap_or(default_preset);
        let mut c = Config::preset(preset)?;
        for (k, v, line) in &entries {
            if k != "preset" {
                c.set(k, v).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                    e => Error::Config(format!("line {line}: {e}")),
                })?;
            }
        }
        c.derive();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, default_preset: &str) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_with_default(&text, default_preset)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let o = &mut self.optim;
        let t = &mut self.train;
        let f = &mut self.finetune;
        match key {
            "model.embed_dim" => m.encoder.embed_dim = num(value)?,
            "model.depth" => m.encoder.depth = num(value)?,
            "model.heads" => m.encoder.heads = num(value)?,
            "model.mlp_ratio" => m.encoder.mlp_ratio = num(value)?,
            "model.dec_dim" => m.dec_dim = num(value)?,
            "model.dec_depth" => m.dec_depth = num(value)?,
            "model.dec_heads" => m.dec_heads = num(value)?,
            "model.head_hidden" => m.head_hidden = num(value)?,
            "model.head_out" => m.head_out = num(value)?,
            "model.casa_dim" => m.casa_dim = num(value)?,
            "model.casa_shared" => m.casa_shared = boolean(value)?,
            "data.phantom" => d.phantom = triple(value)?,
            "data.n_organs" => d.n_organs = num(value)?,
            "data.crop" => d.crop = triple(value)?,
            "data.patch" => d.patch = triple(value)?,
            "data.jitter" => d.jitter = num(value)?,
            "data.n_pairs" => d.n_pairs = num(value)?,
            "data.deform_amp" => d.deform_amp = num(value)?,
            "data.noise_std" => d.noise_std = num(value)?,
            "optim.beta1" => o.beta1 = num(value)?,
            "optim.beta2" => o.beta2 = num(value)?,
            "optim.weight_decay" => o.weight_decay = num(value)?,
            "optim.peak_lr" => o.peak_lr = num(value)?,
            "optim.warmup_steps" => o.warmup_steps = num(value)?,
            "optim.total_steps" => o.total_steps = num(value)?,
            "optim.min_lr" => o.min_lr = num(value)?,
            "optim.eps" => o.eps = num(value)?,
            "optim.clip_norm" => o.clip_norm = if value == "none" { None } else { Some(num(value)?) },
            "optim.decay_vectors" => o.decay_vectors = boolean(value)?,
            "train.batch_size" => t.batch_size = num(value)?,
            "train.mask_ratio" => t.mask_ratio = num(value)?,
            "train.ema_momentum" => t.ema_momentum = num(value)?,
            "train.ema_schedule" => {
                t.ema_schedule = match value {
                    "constant" => EmaSchedule::Constant,
                    "cosine" => EmaSchedule::Cosine,
                    _ => return Err(Error::Config(format!("unknown EMA schedule {value:?}"))),
                }
            }
            "train.use_ldv" => t.flags.use_ldv = boolean(value)?,
            "train.use_casa" => t.flags.use_casa = boolean(value)?,
            "train.loss_kind" => t.flags.loss_kind = LossKind::parse(value)?,
            "train.w_r" => t.weights.r = num(value)?,
            "train.w_dv" => t.weights.dv = num(value)?,
            "train.w_st" => t.weights.st = num(value)?,
            "train.tau" => t.tau = num(value)?,
            "train.seed" => t.seed = num(value)?,
            "train.checkpoint_every" => t.checkpoint_every = num(value)?,
            "train.diagnostics" => t.diagnostics = boolean(value)?,
            "finetune.steps" => f.steps = num(value)?,
            "finetune.lr" => f.lr = num(value)?,
            "finetune.weight_decay" => f.weight_decay = num(value)?,
            "finetune.batch_size" => f.batch_size = num(value)?,
            "finetune.n_train" => f.n_train = num(value)?,
            "finetune.n_test" => f.n_test = num(value)?,
            "finetune.nsd_tolerance" => f.nsd_tolerance = num(value)?,
            "finetune.seg_hidden" => f.seg_hidden = num(value)?,
            "finetune.n_seeds" => f.n_seeds = num(value)?,
            "finetune.cls_steps" => f.cls_steps = num(value)?,
            "finetune.cls_lr" => f.cls_lr = num(value)?,
            "finetune.n_cls_train" => f.n_cls_train = num(value)?,
            "finetune.n_cls_test" => f.n_cls_test = num(value)?,
            "finetune.lesion_radius" => f.lesion_radius = num(value)?,
            "ablate.n_seeds" => self.ablate.n_seeds = num(value)?,
            "ablate.pretrain_steps" => self.ablate.pretrain_steps = num(value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its text value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let d = &self.data;
        let o = &self.optim;
        let t = &self.train;
        let f = &self.finetune;
        let tri = |v: [usize; 3]| format!("{}x{}x{}", v[0], v[1], v[2]);
        let sched = match t.ema_schedule {
            EmaSchedule::Constant => "constant",
            EmaSchedule::Cosine => "cosine",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("model.embed_dim", m.encoder.embed_dim.to_string()),
            ("model.depth", m.encoder.depth.to_string()),
            ("model.heads", m.encoder.heads.to_string()),
            ("model.mlp_ratio", m.encoder.mlp_ratio.to_string()),
            ("model.dec_dim", m.dec_dim.to_string()),
            ("model.dec_depth", m.dec_depth.to_string()),
            ("model.dec_heads", m.dec_heads.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.head_out", m.head_out.to_string()),
            ("model.casa_dim", m.casa_dim.to_string()),
            ("model.casa_shared", m.casa_shared.to_string()),
            ("data.phantom", tri(d.phantom)),
            ("data.n_organs", d.n_organs.to_string()),
            ("data.crop", tri(d.crop)),
            ("data.patch", tri(d.patch)),
            ("data.jitter", d.jitter.to_string()),
            ("data.n_pairs", d.n_pairs.to_string()),
            ("data.deform_amp", d.deform_amp.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.peak_lr", o.peak_lr.to_string()),
            ("optim.warmup_steps", o.warmup_steps.to_string()),
            ("optim.total_steps", o.total_steps.to_string()),
            ("optim.min_lr", o.min_lr.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.clip_norm", o.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("optim.decay_vectors", o.decay_vectors.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.mask_ratio", t.mask_ratio.to_string()),
            ("train.ema_momentum", t.ema_momentum.to_string()),
            ("train.ema_schedule", sched.into()),
            ("train.use_ldv", t.flags.use_ldv.to_string()),
            ("train.use_casa", t.flags.use_casa.to_string()),
            ("train.loss_kind", t.flags.loss_kind.name().into()),
            ("train.w_r", t.weights.r.to_string()),
            ("train.w_dv", t.weights.dv.to_string()),
            ("train.w_st", t.weights.st.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.diagnostics", t.diagnostics.to_string()),
            ("finetune.steps", f.steps.to_string()),
            ("finetune.lr", f.lr.to_string()),
            ("finetune.weight_decay", f.weight_decay.to_string()),
            ("finetune.batch_size", f.batch_size.to_string()),
            ("finetune.n_train", f.n_train.to_string()),
            ("finetune.n_test", f.n_test.to_string()),
            ("finetune.nsd_tolerance", f.nsd_tolerance.to_string()),
            ("finetune.seg_hidden", f.seg_hidden.to_string()),
            ("finetune.n_seeds", f.n_seeds.to_string()),
            ("finetune.cls_steps", f.cls_steps.to_string()),
            ("finetune.cls_lr", f.cls_lr.to_string()),
            ("finetune.n_cls_train", f.n_cls_train.to_string()),
            ("finetune.n_cls_test", f.n_cls_test.to_string()),
            ("finetune.lesion_radius", f.lesion_radius.to_string()),
            ("ablate.n_seeds", self.ablate.n_seeds.to_string()),
            ("ablate.pretrain_steps", self.ablate.pretrain_steps.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The resolved snapshot: one `key = value` line per key, sorted.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hash of the keys that shape pretraining (architecture, data, optimizer
    /// and training settings other than checkpoint cadence and diagnostics).
    pub fn pretrain_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            let relevant = ["model.", "data.", "optim.", "train."].iter().any(|p| k.starts_with(p));
            if relevant && k != "train.checkpoint_every" && k != "train.diagnostics" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }
}

fn parse_entries(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        if out.iter().any(|(seen, _, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value {v:?}: {e}")))
}

fn boolean(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("expected true or false, got {v:?}"))),
    }
}

fn triple(v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected AxBxC, got {v:?}")));
    }
    Ok([num(parts[0])?, num(parts[1])?, num(parts[2])?])
}
