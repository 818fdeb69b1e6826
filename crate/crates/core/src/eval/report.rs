//! Downstream reports and their JSON form.
//!
//! `eval.json` schema:
//!
//! ```text
//! {
//!   "init": "random" | "pretrained" | "labels",
//!   "seeds": [u64],
//!   "flags": null | {"use_ldv": bool, "use_casa": bool, "loss_kind": "Cosine" | "InfoNce"},
//!   "nsd_tolerance": f64,
//!   "per_class_dsc": [f64],   // classes 1..=L, averaged over seeds
//!   "per_class_nsd": [f64],
//!   "mean_dsc": f64 | null,   // null when no segmentation task ran
//!   "mean_nsd": f64 | null,
//!   "dsc_per_seed": [f64],
//!   "auc": null | f64         // mean over seeds of the lesion probe AUC
//! }
//! ```

use serde::{Deserialize, Deserializer, Serialize};

use super::metrics::{dice_score, nsd_score};
use super::seg::{ClsResult, SegResult};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::losses::AblationFlags;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub init: String,
    pub seeds: Vec<u64>,
    pub flags: Option<AblationFlags>,
    pub nsd_tolerance: f64,
    pub per_class_dsc: Vec<f64>,
    pub per_class_nsd: Vec<f64>,
    #[serde(deserialize_with = "null_as_nan")]
    pub mean_dsc: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub mean_nsd: f64,
    pub dsc_per_seed: Vec<f64>,
    pub auc: Option<f64>,
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl EvalReport {
    pub fn from_runs(
        init: &str,
        flags: Option<AblationFlags>,
        nsd_tolerance: f64,
        seg: &[SegResult],
        cls: &[ClsResult],
    ) -> Result<EvalReport> {
        if seg.is_empty() {
            return Err(Error::invalid("report over no runs"));
        }
        let classes = seg[0].per_class_dsc.len();
        let avg = |f: fn(&SegResult) -> &Vec<f64>| -> Vec<f64> {
            (0..classes)
                .map(|c| seg.iter().map(|r| f(r)[c]).sum::<f64>() / seg.len() as f64)
                .collect()
        };
        let per_class_dsc = avg(|r| &r.per_class_dsc);
        let per_class_nsd = avg(|r| &r.per_class_nsd);
        Ok(EvalReport {
            init: init.into(),
            seeds: seg.iter().map(|r| r.seed).collect(),
            flags,
            nsd_tolerance,
            mean_dsc: mean(&per_class_dsc),
            mean_nsd: mean(&per_class_nsd),
            per_class_dsc,
            per_class_nsd,
            dsc_per_seed: seg.iter().map(|r| r.mean_dsc).collect(),
            auc: (!cls.is_empty()).then(|| mean(&cls.iter().map(|c| c.auc).collect::<Vec<_>>())),
        })
    }

    /// Scores a predicted label volume against a reference, classes
    /// `1..=max label` of either volume.
    pub fn from_label_volumes(pred: &Volume, truth: &Volume, nsd_tolerance: f64) -> Result<EvalReport> {
        if pred.extents() != truth.extents() {
            return Err(Error::shape(format!(
                "prediction {:?} vs reference {:?}",
                pred.extents(),
                truth.extents()
            )));
        }
        let (Some(p), Some(t)) = (pred.labels(), truth.labels()) else {
            return Err(Error::invalid("both volumes need label grids"));
        };
        let top = p.iter().chain(t).copied().max().unwrap_or(0);
        if top == 0 {
            return Err(Error::invalid("no foreground class in either volume"));
        }
        let mut dsc = Vec::new();
        let mut nsd = Vec::new();
        for c in 1..=top {
            dsc.push(dice_score(p, t, c)?);
            nsd.push(nsd_score(p, t, pred.extents(), c, nsd_tolerance)?);
        }
        Ok(EvalReport {
            init: "labels".into(),
            seeds: Vec::new(),
            flags: None,
            nsd_tolerance,
            mean_dsc: mean(&dsc),
            mean_nsd: mean(&nsd),
            dsc_per_seed: Vec::new(),
            per_class_dsc: dsc,
            per_class_nsd: nsd,
            auc: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}
