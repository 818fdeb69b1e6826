use std::fs;

use alice::config::{Config, EmaSchedule};
use alice::error::Error;
use alice::model::ModelState;
use alice::seed::tag;
use alice::train::{
    checkpoint_file_name, ema_momentum, lr_schedule, model_config, pretrain_run, read_loss_csv, train_step,
    AdamState, Checkpoint, PairSource, RunOptions, LOSS_CSV_FILE,
};

fn tiny() -> Config {
    let mut c = Config::preset("desk").unwrap();
    c.set("optim.total_steps", "6").unwrap();
    c.set("optim.warmup_steps", "2").unwrap();
    c.set("train.checkpoint_every", "3").unwrap();
    c.set("train.batch_size", "2").unwrap();
    c.validate().unwrap();
    c
}

fn opts(dir: &std::path::Path) -> RunOptions<'_> {
    RunOptions {
        out_dir: Some(dir),
        resume: None,
        stop_after: None,
        on_step: None,
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let mut o = tiny().optim;
    o.total_steps = 100;
    o.warmup_steps = 10;
    assert_eq!(lr_schedule(0, &o), 0.0);
    assert!((lr_schedule(5, &o) - 0.5 * o.peak_lr).abs() < 1e-18);
    assert_eq!(lr_schedule(10, &o), o.peak_lr);
    assert!((lr_schedule(100, &o) - o.min_lr).abs() < 1e-18);
    assert_eq!(lr_schedule(500, &o), o.min_lr);
    for s in 10..100 {
        assert!(lr_schedule(s + 1, &o) <= lr_schedule(s, &o));
    }
}

#[test]
fn cosine_momentum_reaches_one() {
    assert_eq!(ema_momentum(0, 50, 0.99, EmaSchedule::Cosine), 0.99);
    assert_eq!(ema_momentum(50, 50, 0.99, EmaSchedule::Cosine), 1.0);
    assert_eq!(ema_momentum(17, 50, 0.99, EmaSchedule::Constant), 0.99);
    let mid = ema_momentum(25, 50, 0.99, EmaSchedule::Cosine);
    assert!((mid - 0.995).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny();
    cfg.optim.peak_lr = 0.0;
    cfg.optim.min_lr = 0.0;
    let mc = model_config(&cfg);
    let mut state = ModelState::init(&mc, 3).unwrap();
    let before = state.clone();
    let mut adam = AdamState::new(&state.online);
    let source = PairSource::new(&cfg, tag::PRETRAIN_DATA).unwrap();
    let grid = cfg.data.grid().unwrap();
    for step in 1..=2 {
        let batch = source.batch(step, &grid).unwrap();
        let r = train_step(&mut state, &mut adam, &batch, &cfg, step).unwrap();
        assert!(r.total.is_finite());
    }
    assert_eq!(state.online, before.online);
    for (k, t) in &state.target {
        let diff = t.data().iter().zip(before.target[k].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-15, "{k}: {diff}");
    }
    assert_eq!(adam.t, 2);
}

#[test]
fn target_holds_only_encoder_and_head_weights() {
    let mc = model_config(&tiny());
    let state = ModelState::init(&mc, 0).unwrap();
    for k in state.target.keys() {
        assert!(state.online.contains_key(k), "{k}");
        assert!(mc.is_target_key(k), "{k}");
        assert!(!k.starts_with("dec."), "{k}");
    }
    assert!(state.online.len() > state.target.len());
}

#[test]
fn run_writes_csv_and_checkpoints() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_run(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(out.reports.len(), 6);
    assert_eq!(
        out.checkpoints,
        vec![dir.path().join(checkpoint_file_name(3)), dir.path().join(checkpoint_file_name(6))]
    );
    let rows = read_loss_csv(&dir.path().join(LOSS_CSV_FILE)).unwrap();
    assert_eq!(rows, out.reports);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
}

#[test]
fn resumed_run_matches_straight_run() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let straight = pretrain_run(&cfg, &opts(a.path())).unwrap();
    let half = RunOptions {
        stop_after: Some(3),
        ..opts(b.path())
    };
    pretrain_run(&cfg, &half).unwrap();
    let ck = b.path().join(checkpoint_file_name(3));
    let rest = RunOptions {
        resume: Some(&ck),
        ..opts(b.path())
    };
    let resumed = pretrain_run(&cfg, &rest).unwrap();
    assert_eq!(resumed.state, straight.state);
    assert_eq!(resumed.adam, straight.adam);
    let csv = |d: &std::path::Path| fs::read(d.join(LOSS_CSV_FILE)).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
    let last = |d: &std::path::Path| fs::read(d.join(checkpoint_file_name(6))).unwrap();
    assert_eq!(last(a.path()), last(b.path()));
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let cfg = tiny();
    let mc = model_config(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_run(&cfg, &RunOptions { stop_after: Some(3), ..opts(dir.path()) }).unwrap();
    let path = dir.path().join(checkpoint_file_name(3));
    let ck = Checkpoint::load(&path, &mc).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(ck.config_hash, cfg.pretrain_hash());
    assert_eq!(ck.state, out.state);
    assert_eq!(ck.adam, out.adam);
    assert_eq!(Checkpoint::from_bytes(&ck.to_bytes(), &mc).unwrap().to_bytes(), ck.to_bytes());

    let mut other = mc.clone();
    other.encoder.embed_dim = 16;
    assert!(matches!(Checkpoint::load(&path, &other), Err(Error::Mismatch(_))));

    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], &mc).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint", &mc).is_err());

    let mut changed = cfg.clone();
    changed.set("train.tau", "0.5").unwrap();
    let resume = RunOptions { resume: Some(&path), ..opts(dir.path()) };
    assert!(matches!(pretrain_run(&changed, &resume), Err(Error::Mismatch(_))));
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let mut cfg = tiny();
    cfg.optim.warmup_steps = cfg.optim.total_steps;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(pretrain_run(&cfg, &opts(dir.path())), Err(Error::Config(_))));
    assert!(!dir.path().join(LOSS_CSV_FILE).exists());
}
