//! Downstream evaluation: metrics, fine-tuning and the ablation grid.

pub mod ablation;
pub mod metrics;
pub mod report;
pub mod seg;

pub use ablation::{ablation_csv, ablation_grid, ablation_matrix, run_cell, AblationRow};
pub use metrics::{auc_score, dice_score, nsd_score};
pub use report::EvalReport;
pub use seg::{finetune_cls, finetune_seg, ClsResult, EncoderInit, SegResult};
