//! The ablation grid over `use_ldv` x `use_casa` x loss kind.

use serde::{Deserialize, Serialize};

use super::report::std_dev;
use super::seg::{finetune_seg, EncoderInit};
use crate::config::Config;
use crate::error::Result;
use crate::losses::{AblationFlags, LossKind};
use crate::train::{pretrain_run, RunOptions};

pub const ABLATION_CSV_HEADER: &str =
    "use_ldv,use_casa,loss_kind,n_seeds,pretrain_steps,finetune_steps,dsc_mean,dsc_std,nsd_mean,nsd_std,dsc_per_seed";

/// All eight flag combinations, baseline first.
pub fn ablation_grid() -> Vec<AblationFlags> {
    let mut out = Vec::with_capacity(8);
    for use_ldv in [true, false] {
        for use_casa in [true, false] {
            for loss_kind in [LossKind::Cosine, LossKind::InfoNce] {
                out.push(AblationFlags {
                    use_ldv,
                    use_casa,
                    loss_kind,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub seeds: Vec<u64>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
}

impl AblationRow {
    pub fn dsc_mean(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len() as f64
    }

    pub fn nsd_mean(&self) -> f64 {
        self.nsd.iter().sum::<f64>() / self.nsd.len() as f64
    }

    pub fn csv_row(&self) -> String {
        let per_seed: Vec<String> = self.dsc.iter().map(|d| d.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.flags.use_ldv,
            self.flags.use_casa,
            self.flags.loss_kind.name(),
            self.seeds.len(),
            self.pretrain_steps,
            self.finetune_steps,
            self.dsc_mean(),
            std_dev(&self.dsc),
            self.nsd_mean(),
            std_dev(&self.nsd),
            per_seed.join(";")
        )
    }
}

/// Configuration of one cell and seed: the flags, the pretraining seed
/// `base + k` and the cell pretraining budget.
pub fn cell_config(cfg: &Config, flags: AblationFlags, k: u64) -> Config {
    let mut c = cfg.clone();
    c.train.flags = flags;
    c.train.seed = cfg.train.seed + k;
    c.optim.total_steps = cfg.ablate.pretrain_steps;
    c
}

/// Pretrains and fine-tunes one cell for `ablate.n_seeds` seeds. Seed `k`
/// pretrains with `train.seed + k` and fine-tunes with the same seed, so
/// cells are paired seed by seed.
pub fn run_cell(cfg: &Config, flags: AblationFlags, progress: &dyn Fn(&str)) -> Result<AblationRow> {
    let mut row = AblationRow {
        flags,
        seeds: Vec::new(),
        pretrain_steps: cfg.ablate.pretrain_steps,
        finetune_steps: cfg.finetune.steps,
        dsc: Vec::new(),
        nsd: Vec::new(),
    };
    for k in 0..cfg.ablate.n_seeds as u64 {
        let c = cell_config(cfg, flags, k);
        let pre = pretrain_run(&c, &RunOptions::default())?;
        let r = finetune_seg(&c, EncoderInit::Pretrained(&pre.state), c.train.seed)?;
        progress(&format!(
            "ldv={} casa={} loss={} seed={} dsc={:.4}",
            flags.use_ldv,
            flags.use_casa,
            flags.loss_kind.name(),
            c.train.seed,
            r.mean_dsc
        ));
        row.seeds.push(c.train.seed);
        row.dsc.push(r.mean_dsc);
        row.nsd.push(r.mean_nsd);
    }
    Ok(row)
}

/// Runs every cell in order. All cell configurations are validated before
/// the first one trains.
pub fn ablation_matrix(cfg: &Config, cells: &[AblationFlags], progress: &dyn Fn(&str)) -> Result<Vec<AblationRow>> {
    for &f in cells {
        cell_config(cfg, f, 0).validate()?;
    }
    cells.iter().map(|&f| run_cell(cfg, f, progress)).collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
