//! Command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 numerical failure, 4 artifact mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alice::config::{Config, PRESETS};
use alice::data::{generate_instance, Volume};
use alice::error::Error;
use alice::eval::ablation::{ablation_csv, ablation_grid, ablation_matrix};
use alice::eval::{finetune_cls, finetune_seg, EncoderInit, EvalReport};
use alice::gradcheck::{model_grad_check, GradCheckOptions};
use alice::losses::{AblationFlags, LossKind};
use alice::model::{ModelConfig, ModelState};
use alice::seed::{self, tag};
use alice::train::{model_config, pretrain_run, Checkpoint, RunOptions, RESOLVED_CONFIG_FILE};
use clap::{Parser, Subcommand, ValueEnum};

const EVAL_FILE: &str = "eval.json";
const ABLATION_FILE: &str = "ablation.csv";

#[derive(Parser, Debug)]
#[command(name = "alice", version, about = "Self-supervised pretraining on synthetic 3-D volumes")]
struct Cli {
    /// Flat `key = value` configuration file, applied on top of its preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when the config file names none (desk | paper-scale).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Accepted for compatibility; every run is single-threaded f64 and
    /// deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes labelled phantom volumes.
    GenPhantom {
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Runs pretraining and writes losses.csv and checkpoints.
    Pretrain {
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fine-tunes on the downstream tasks and writes eval.json.
    Finetune {
        /// Pretrained checkpoint; random encoder initialisation without it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Task::Both)]
        task: Task,
    },
    /// Scores a predicted label volume against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Pretrains and fine-tunes every flag combination; writes ablation.csv.
    Ablate {
        /// Only the baseline and its three single-flag changes.
        #[arg(long)]
        one_factor: bool,
    },
    /// Verifies analytic gradients of the micro model.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Seg,
    Cls,
    Both,
}

enum Failure {
    Core(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) | Error::ZeroNorm(_) => 3,
        Error::Mismatch(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn resolve(cli: &Cli) -> Result<Config, Error> {
    if !PRESETS.contains(&cli.preset.as_str()) {
        return Err(Error::Config(format!(
            "unknown preset {:?}; expected one of {PRESETS:?}",
            cli.preset
        )));
    }
    let mut text = match &cli.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Config(format!("override {o:?} is not key=value")));
        };
        text.push_str(&format!("\n{} = {}", k.trim(), v.trim()));
    }
    if let Some(s) = cli.seed {
        text.push_str(&format!("\ntrain.seed = {s}"));
    }
    Config::parse_with_default(&text, &cli.preset)
}

fn write_snapshot(out: &Path, cfg: &Config) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn gen_phantom(cfg: &Config, out: &Path, count: u64) -> Result<(), Failure> {
    let pc = cfg.data.phantom_config();
    for i in 0..count {
        let root = seed::derive(cfg.train.seed, &[tag::PRETRAIN_DATA, i]);
        let v = generate_instance(&pc, seed::derive(root, &[tag::ANATOMY]), seed::derive(root, &[tag::DEFORM]))?;
        let path = out.join(format!("phantom-{i}.avol"));
        v.save(&path)?;
        println!("{} {:?}", path.display(), v.extents());
    }
    Ok(())
}

fn pretrain(cfg: &Config, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<(), Failure> {
    let every = (cfg.optim.total_steps / 20).max(1);
    let progress = |r: &alice::losses::LossReport| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!(
                "step {:>6}  l_r {:.4}  l_dv {:.4}  l_st {:.4}  total {:.4}  lr {:.2e}",
                r.step, r.l_r, r.l_dv, r.l_st, r.total, r.lr
            );
        }
    };
    let outcome = pretrain_run(
        cfg,
        &RunOptions {
            out_dir: Some(out),
            resume,
            stop_after,
            on_step: Some(&progress),
        },
    )?;
    for c in &outcome.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

fn finetune(cfg: &Config, out: &Path, checkpoint: Option<&Path>, task: Task) -> Result<(), Failure> {
    let state: Option<ModelState> = match checkpoint {
        Some(p) => Some(Checkpoint::load(p, &model_config(cfg))?.state),
        None => None,
    };
    let init = match &state {
        Some(s) => EncoderInit::Pretrained(s),
        None => EncoderInit::Random,
    };
    let f = &cfg.finetune;
    let seeds: Vec<u64> = (0..f.n_seeds as u64).map(|k| cfg.train.seed + k).collect();
    let mut seg = Vec::new();
    let mut cls = Vec::new();
    for &s in &seeds {
        if task != Task::Cls {
            let r = finetune_seg(cfg, init, s)?;
            eprintln!("seed {s}: mean DSC {:.4}  mean NSD {:.4}", r.mean_dsc, r.mean_nsd);
            seg.push(r);
        }
        if task != Task::Seg {
            let r = finetune_cls(cfg, init, s)?;
            eprintln!("seed {s}: AUC {:.4}", r.auc);
            cls.push(r);
        }
    }
    let mut report = if seg.is_empty() {
        EvalReport {
            init: init.kind().into(),
            seeds: seeds.clone(),
            flags: None,
            nsd_tolerance: f.nsd_tolerance,
            per_class_dsc: Vec::new(),
            per_class_nsd: Vec::new(),
            mean_dsc: f64::NAN,
            mean_nsd: f64::NAN,
            dsc_per_seed: Vec::new(),
            auc: Some(cls.iter().map(|c| c.auc).sum::<f64>() / cls.len() as f64),
        }
    } else {
        EvalReport::from_runs(init.kind(), None, f.nsd_tolerance, &seg, &cls)?
    };
    if state.is_some() {
        report.flags = Some(cfg.train.flags);
    }
    fs::write(out.join(EVAL_FILE), report.to_json())?;
    println!("{}", out.join(EVAL_FILE).display());
    Ok(())
}

fn eval(cfg: &Config, out: &Path, pred: &Path, truth: &Path) -> Result<(), Failure> {
    let p = Volume::load(pred)?;
    let t = Volume::load(truth)?;
    let report = EvalReport::from_label_volumes(&p, &t, cfg.finetune.nsd_tolerance)?;
    println!("mean DSC {:.6}  mean NSD {:.6}", report.mean_dsc, report.mean_nsd);
    fs::write(out.join(EVAL_FILE), report.to_json())?;
    Ok(())
}

fn ablate(cfg: &Config, out: &Path, one_factor: bool) -> Result<(), Failure> {
    let cells = if one_factor {
        let base = AblationFlags::default();
        vec![
            base,
            AblationFlags { use_ldv: false, ..base },
            AblationFlags { use_casa: false, ..base },
            AblationFlags { loss_kind: LossKind::InfoNce, ..base },
        ]
    } else {
        ablation_grid()
    };
    let rows = ablation_matrix(cfg, &cells, &|line| eprintln!("{line}"))?;
    fs::write(out.join(ABLATION_FILE), ablation_csv(&rows))?;
    println!("{}", out.join(ABLATION_FILE).display());
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<(), Failure> {
    let base = AblationFlags::default();
    let variants = [
        base,
        AblationFlags { use_casa: false, ..base },
        AblationFlags { loss_kind: LossKind::InfoNce, ..base },
    ];
    let mut unshared = ModelConfig::micro();
    unshared.casa_shared = false;
    let mut failed = Vec::new();
    for (label, model) in [("shared", ModelConfig::micro()), ("unshared", unshared)] {
        for flags in variants {
            for s in 0..seeds {
                let c = model_grad_check(&model, flags, s, 2, GradCheckOptions::default())?;
                let ok = c.report.passed();
                println!(
                    "casa={label} use_casa={} loss={} seed={s} checked={} max_rel_err={:.3e} {}",
                    flags.use_casa,
                    flags.loss_kind.name(),
                    c.report.checked,
                    c.report.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(format!("{label}/{}/{s}: {:?}", flags.loss_kind.name(), c.failing_params()));
                }
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(failed.join("; ")))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    if let Command::Gradcheck { seeds } = cli.command {
        return gradcheck(seeds);
    }
    write_snapshot(&cli.out, &cfg)?;
    match &cli.command {
        Command::GenPhantom { count } => gen_phantom(&cfg, &cli.out, *count),
        Command::Pretrain { resume, stop_after } => pretrain(&cfg, &cli.out, resume.as_deref(), *stop_after),
        Command::Finetune { checkpoint, task } => finetune(&cfg, &cli.out, checkpoint.as_deref(), *task),
        Command::Eval { pred, truth } => eval(&cfg, &cli.out, pred, truth),
        Command::Ablate { one_factor } => ablate(&cfg, &cli.out, *one_factor),
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::GradCheck(msg)) => {
            eprintln!("gradient check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
