//! Reconstruction, inter-volume and intra-volume objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{MaskSpec, ViewBundle};
use crate::error::{Error, Result};
use crate::model::{forward_bundle, Bound, ForwardBundle, ModelConfig};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Cosine,
    InfoNce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cosine => "cosine",
            LossKind::InfoNce => "infonce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LossKind::Cosine),
            "infonce" => Ok(LossKind::InfoNce),
            _ => Err(Error::Config(format!("unknown loss kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub r: f64,
    pub dv: f64,
    pub st: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            r: 1.0,
            dv: 1.0,
            st: 1.0,
        }
    }
}

/// Switches of the three ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_ldv: bool,
    pub use_casa: bool,
    pub loss_kind: LossKind,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_ldv: true,
            use_casa: true,
            loss_kind: LossKind::Cosine,
        }
    }
}

/// `-mean_i cos(a_i, b_i)` over rows, differentiable in both arguments.
pub fn cosine_loss_between(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(format!(
            "cosine loss between {:?} and {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    let rows = g.value(a).rows();
    let na = g.l2_normalize(a, None)?;
    let nb = g.l2_normalize(b, None)?;
    let prod = g.mul(na, nb)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / rows as f64)
}

/// `ℓ_s(student, teacher)`: negative cosine with the teacher held constant.
pub fn student_teacher_loss(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let t = g.detach(teacher);
    cosine_loss_between(g, student, t)
}

/// Mean squared error over the voxels of masked tokens of one crop.
pub fn recon_term(g: &mut Graph, pred: Var, target: &Tensor, mask: &MaskSpec) -> Result<Var> {
    if mask.n_masked() == 0 {
        return Err(Error::invalid("reconstruction loss needs at least one masked token"));
    }
    if g.value(pred).shape() != target.shape() {
        return Err(Error::shape(format!(
            "predictions {:?} vs targets {:?}",
            g.value(pred).shape(),
            target.shape()
        )));
    }
    let p = g.gather_rows(pred, &mask.masked)?;
    let t = g.constant(target.gather_rows(&mask.masked)?);
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Sum of per-crop masked-voxel MSEs.
pub fn recon_loss(g: &mut Graph, crops: &[(Var, &Tensor, &MaskSpec)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(pred, target, mask) in crops {
        let term = recon_term(g, pred, target, mask)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::invalid("reconstruction loss over no crops"))
}

/// `ℓ_s([cls]_u^Q, [cls]_v^K) + ℓ_s([cls]_r^K, [cls]_w^Q)`.
pub fn inter_volume_loss(g: &mut Graph, cls_u_q: Var, cls_v_k: Var, cls_r_k: Var, cls_w_q: Var) -> Result<Var> {
    let a = student_teacher_loss(g, cls_u_q, cls_v_k)?;
    let b = student_teacher_loss(g, cls_r_k, cls_w_q)?;
    g.add(a, b)
}

/// `ℓ_s(S_u^Q, T_w^Q) + ℓ_s(S_r^K, T_v^K)` with row `i` paired to row `i`.
pub fn intra_volume_loss(g: &mut Graph, s_u_q: Var, t_w_q: Var, s_r_k: Var, t_v_k: Var) -> Result<Var> {
    let a = student_teacher_loss(g, s_u_q, t_w_q)?;
    let b = student_teacher_loss(g, s_r_k, t_v_k)?;
    g.add(a, b)
}

/// Normalised-temperature cross-entropy: anchor `i` must pick partner `i`
/// among all partners of the batch. Partners are held constant.
pub fn infonce_loss(g: &mut Graph, anchors: &[Var], partners: &[Var], tau: f64) -> Result<Var> {
    if anchors.len() < 2 || anchors.len() != partners.len() {
        return Err(Error::invalid(format!(
            "InfoNCE needs a batch of at least 2 matched pairs, got {} anchors and {} partners",
            anchors.len(),
            partners.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let a = g.concat(anchors, 0)?;
    let p = g.concat(partners, 0)?;
    let p = g.detach(p);
    let a = g.l2_normalize(a, None)?;
    let p = g.l2_normalize(p, None)?;
    let pt = g.transpose(p)?;
    let sim = g.matmul(a, pt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..anchors.len()).collect();
    g.cross_entropy(logits, &targets)
}

/// Scalar loss values of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_r: f64,
    pub l_dv: f64,
    pub l_st: f64,
    pub total: f64,
    /// Gradient norms of `l_r`, `l_dv`, `l_st` when diagnostics are on.
    pub grad_norms: Option<[f64; 3]>,
    pub lr: f64,
    pub ema_m: f64,
    /// The optimizer skipped this step because of non-finite gradients.
    #[serde(default)]
    pub skipped: bool,
}

pub const LOSS_CSV_HEADER: &str = "step,l_r,l_dv,l_st,total,lr,ema_m";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_r, self.l_dv, self.l_st, self.total, self.lr, self.ema_m
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("loss row with {} fields", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| Error::Format(format!("field {i} of loss row: {e}")))
        };
        Ok(LossReport {
            step: f[0]
                .parse()
                .map_err(|e| Error::Format(format!("step of loss row: {e}")))?,
            l_r: num(1)?,
            l_dv: num(2)?,
            l_st: num(3)?,
            total: num(4)?,
            grad_norms: None,
            lr: num(5)?,
            ema_m: num(6)?,
            skipped: false,
        })
    }
}

/// Weighted total of already evaluated terms.
pub fn total_loss(step: usize, l_r: f64, l_dv: f64, l_st: f64, w: LossWeights) -> Result<LossReport> {
    for (name, v) in [("l_r", l_r), ("l_dv", l_dv), ("l_st", l_st)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v} at step {step}")));
        }
    }
    let total = w.r * l_r + w.dv * l_dv + w.st * l_st;
    Ok(LossReport {
        step,
        l_r,
        l_dv,
        l_st,
        total,
        grad_norms: None,
        lr: 0.0,
        ema_m: 0.0,
        skipped: false,
    })
}

/// Graph handles of the batch-averaged objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub l_r: Var,
    pub l_dv: Var,
    pub l_st: Var,
    pub total: Var,
    pub forwards: Vec<ForwardBundle>,
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Forward pass and loss terms over a batch of bundles, averaged per batch.
///
/// With CASA off, `l_st` compares the pooled φ-projected decoder features
/// against the pooled ψ-projected target features of the same crop. With
/// `use_ldv` off, `l_dv` is still evaluated but carries no weight.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    g: &mut Graph,
    online: &Bound,
    target: &Bound,
    cfg: &ModelConfig,
    bundles: &[ViewBundle],
    flags: AblationFlags,
    weights: LossWeights,
    tau: f64,
) -> Result<Objective> {
    if bundles.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut forwards = Vec::with_capacity(bundles.len());
    let (mut lr, mut ldv, mut lst) = (Vec::new(), Vec::new(), Vec::new());
    for b in bundles {
        let f = forward_bundle(g, online, target, cfg, b, flags.use_casa)?;
        lr.push(recon_loss(
            g,
            &[(f.q.pred, &b.q_target, &b.mask_u), (f.k.pred, &b.k_target, &b.mask_r)],
        )?);
        if flags.loss_kind == LossKind::Cosine {
            ldv.push(inter_volume_loss(g, f.q.cls_h, f.k.cls_y, f.k.cls_h, f.q.cls_y)?);
        }
        lst.push(match (f.q.s, f.q.t, f.k.s, f.k.t) {
            (Some(sq), Some(tq), Some(sk), Some(tk)) => intra_volume_loss(g, sq, tq, sk, tk)?,
            _ => intra_volume_loss(g, f.q.cls_h, f.q.cls_y, f.k.cls_h, f.k.cls_y)?,
        });
        forwards.push(f);
    }
    let l_r = batch_mean(g, &lr)?;
    let l_st = batch_mean(g, &lst)?;
    let l_dv = match flags.loss_kind {
        LossKind::Cosine => batch_mean(g, &ldv)?,
        LossKind::InfoNce => {
            let hq: Vec<Var> = forwards.iter().map(|f| f.q.cls_h).collect();
            let yk: Vec<Var> = forwards.iter().map(|f| f.k.cls_y).collect();
            let hk: Vec<Var> = forwards.iter().map(|f| f.k.cls_h).collect();
            let yq: Vec<Var> = forwards.iter().map(|f| f.q.cls_y).collect();
            let a = infonce_loss(g, &hq, &yk, tau)?;
            let b = infonce_loss(g, &hk, &yq, tau)?;
            g.add(a, b)?
        }
    };
    let w_dv = if flags.use_ldv { weights.dv } else { 0.0 };
    let mut total = g.scale(l_r, weights.r)?;
    for (term, w) in [(l_dv, w_dv), (l_st, weights.st)] {
        if w != 0.0 {
            let t = g.scale(term, w)?;
            total = g.add(total, t)?;
        }
    }
    Ok(Objective {
        l_r,
        l_dv,
        l_st,
        total,
        forwards,
    })
}
