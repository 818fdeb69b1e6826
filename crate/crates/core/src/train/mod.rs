//! Optimizer, schedules, the training step, checkpoints and the pretraining
//! loop.

pub mod checkpoint;
pub mod optim;
pub mod run;
pub mod step;

pub use checkpoint::Checkpoint;
pub use optim::{adamw_step, lr_schedule, AdamState, OptimizerConfig, StepOutcome};
pub use run::{
    checkpoint_file_name, model_config, pretrain_run, read_loss_csv, PairSource, PretrainOutcome, RunOptions,
    LOSS_CSV_FILE, RESOLVED_CONFIG_FILE,
};
pub use step::{ema_momentum, train_step};
