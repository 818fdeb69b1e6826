//! Pretraining data stream and the resumable training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::optim::AdamState;
use super::step::train_step;
use crate::config::Config;
use crate::data::{build_bundle, sample_aligned_crops, CropPair, PatchGrid, ViewBundle};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LOSS_CSV_HEADER};
use crate::model::{ModelConfig, ModelState};
use crate::seed::{self, tag};

const PAIR_RETRIES: u64 = 8;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const LOSS_CSV_FILE: &str = "losses.csv";

pub fn checkpoint_file_name(step: usize) -> String {
    format!("checkpoint-{step}.bin")
}

/// Model architecture implied by a run configuration.
pub fn model_config(cfg: &Config) -> ModelConfig {
    cfg.model.clone()
}

/// Crop pairs for pretraining, drawn from seed namespace `namespace`.
pub struct PairSource {
    cfg: Config,
    namespace: u64,
    pool: Vec<CropPair>,
}

impl PairSource {
    pub fn new(cfg: &Config, namespace: u64) -> Result<Self> {
        let mut src = PairSource {
            cfg: cfg.clone(),
            namespace,
            pool: Vec::new(),
        };
        src.pool = (0..cfg.data.n_pairs as u64)
            .map(|i| src.generate(i))
            .collect::<Result<_>>()?;
        Ok(src)
    }

    fn root(&self) -> u64 {
        seed::derive(self.cfg.train.seed, &[self.namespace])
    }

    /// The `i`-th distinct pair of this source.
    pub fn generate(&self, i: u64) -> Result<CropPair> {
        let d = &self.cfg.data;
        let root = self.root();
        let mut last = None;
        for attempt in 0..PAIR_RETRIES {
            let s = |t: u64, extra: u64| seed::derive(root, &[t, i, attempt, extra]);
            match sample_aligned_crops(
                &d.phantom_config(),
                s(tag::ANATOMY, 0),
                (s(tag::DEFORM, 0), s(tag::DEFORM, 1)),
                d.crop,
                d.jitter,
                s(tag::PICK, 0),
            ) {
                Ok(p) => return Ok(p),
                Err(e @ Error::Placement(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn pair(&self, step: usize, b: usize) -> Result<CropPair> {
        if self.pool.is_empty() {
            let i = (step * self.cfg.train.batch_size + b) as u64;
            self.generate(i)
        } else {
            let pick = seed::derive(self.root(), &[tag::ORDER, step as u64, b as u64]);
            Ok(self.pool[(pick % self.pool.len() as u64) as usize].clone())
        }
    }

    /// View bundles of training step `step`; a pure function of the
    /// configuration and `step`.
    pub fn batch(&self, step: usize, grid: &PatchGrid) -> Result<Vec<ViewBundle>> {
        (0..self.cfg.train.batch_size)
            .map(|b| {
                let pair = self.pair(step, b)?;
                let s = seed::derive(self.root(), &[tag::STEP, step as u64, b as u64]);
                build_bundle(&pair, grid, self.cfg.train.mask_ratio, s)
            })
            .collect()
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where `config.resolved`, `losses.csv` and checkpoints go.
    pub out_dir: Option<&'a Path>,
    /// Checkpoint to continue from; its configuration hash must match.
    pub resume: Option<&'a Path>,
    /// Stop after this step even if the schedule runs longer.
    pub stop_after: Option<usize>,
    pub on_step: Option<&'a dyn Fn(&LossReport)>,
}

pub struct PretrainOutcome {
    pub state: ModelState,
    pub adam: AdamState,
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_csv_rows(path: &Path, rows: &[LossReport], append: bool) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    if !append {
        writeln!(f, "{LOSS_CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Reads a loss CSV written by [`pretrain_run`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format(format!("{} lacks the loss header", path.display())));
    }
    lines.map(LossReport::parse_csv_row).collect()
}

/// Runs pretraining from scratch or from `opts.resume`.
///
/// Data, masks and augmentations of each step derive from the seed and the
/// step index alone, so a resumed run continues bitwise-identically.
pub fn pretrain_run(cfg: &Config, opts: &RunOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let grid = cfg.data.grid()?;
    let model_cfg = model_config(cfg);
    let hash = cfg.pretrain_hash();
    let (mut state, mut adam, start) = match opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path, &model_cfg)?;
            if ck.config_hash != hash {
                return Err(Error::Mismatch(format!(
                    "checkpoint {} was written under a different configuration",
                    path.display()
                )));
            }
            (ck.state, ck.adam, ck.step as usize)
        }
        None => {
            let state = ModelState::init(&model_cfg, cfg.train.seed)?;
            let adam = AdamState::new(&state.online);
            (state, adam, 0)
        }
    };
    let end = opts
        .stop_after
        .unwrap_or(cfg.optim.total_steps)
        .min(cfg.optim.total_steps);
    let source = PairSource::new(cfg, tag::PRETRAIN_DATA)?;

    let csv = opts.out_dir.map(|d| d.join(LOSS_CSV_FILE));
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_text())?;
        let csv = csv.as_ref().expect("set with out_dir");
        if start > 0 && csv.exists() {
            let kept: Vec<LossReport> = read_loss_csv(csv)?
                .into_iter()
                .filter(|r| r.step <= start)
                .collect();
            write_csv_rows(csv, &kept, false)?;
        } else {
            write_csv_rows(csv, &[], false)?;
        }
    }

    let mut reports = Vec::with_capacity(end.saturating_sub(start));
    let mut checkpoints = Vec::new();
    for step in start + 1..=end {
        let batch = source.batch(step, &grid)?;
        let report = train_step(&mut state, &mut adam, &batch, cfg, step)?;
        if let Some(cb) = opts.on_step {
            cb(&report);
        }
        if let Some(csv) = &csv {
            write_csv_rows(csv, std::slice::from_ref(&report), true)?;
        }
        reports.push(report);
        let cadence = cfg.train.checkpoint_every;
        if let Some(dir) = opts.out_dir {
            if step == end || (cadence > 0 && step % cadence == 0) {
                let path = dir.join(checkpoint_file_name(step));
                Checkpoint {
                    config_hash: hash,
                    step: step as u64,
                    state: state.clone(),
                    adam: adam.clone(),
                }
                .save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(PretrainOutcome {
        state,
        adam,
        reports,
        checkpoints,
    })
}
