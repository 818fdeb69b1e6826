//! Forward passes of the online, target and CASA branches.

use super::config::ModelConfig;
use super::layers::{block, linear, norm};
use super::params::Bound;
use crate::autodiff::{Graph, Var};
use crate::data::{MaskSpec, ViewBundle};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Embeds the token rows listed in `rows`, adds their positional embeddings
/// and runs the encoder stack under `p`.
fn encoder(g: &mut Graph, p: &Bound, cfg: &ModelConfig, tokens: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::invalid("encoder input has no tokens"));
    }
    let (n, width) = g.value(tokens).dims2()?;
    let e = &cfg.encoder;
    if n != e.n_tokens || width != e.patch_voxels {
        return Err(Error::shape(format!(
            "token matrix [{n}, {width}] for a model of {} tokens x {} voxels",
            e.n_tokens, e.patch_voxels
        )));
    }
    let x = g.gather_rows(tokens, rows)?;
    let x = linear(g, p, "enc.patch", x)?;
    let pos = p.get("enc.pos")?;
    let pos = g.gather_rows(pos, rows)?;
    let mut x = g.add(x, pos)?;
    for i in 0..e.depth {
        x = block(g, p, &format!("enc.blk{i}"), x, e.heads)?;
    }
    norm(g, p, "enc.norm", x)
}

/// Online encoder on the visible rows of `tokens` only.
pub fn encode_visible(g: &mut Graph, p: &Bound, cfg: &ModelConfig, tokens: Var, mask: &MaskSpec) -> Result<Var> {
    if mask.n_tokens != cfg.encoder.n_tokens {
        return Err(Error::shape(format!(
            "mask over {} tokens for a model of {}",
            mask.n_tokens, cfg.encoder.n_tokens
        )));
    }
    encoder(g, p, cfg, tokens, &mask.visible)
}

/// Target encoder on every row. Bind `p` as constants so nothing flows back.
pub fn encode_target(g: &mut Graph, p: &Bound, cfg: &ModelConfig, tokens: Var) -> Result<Var> {
    let all: Vec<usize> = (0..cfg.encoder.n_tokens).collect();
    encoder(g, p, cfg, tokens, &all)
}

/// Decoder over visible features plus mask tokens in canonical order.
/// Returns `(features N x D, predictions N x voxels)`.
pub fn decode_full(g: &mut Graph, p: &Bound, cfg: &ModelConfig, v: Var, mask: &MaskSpec) -> Result<(Var, Var)> {
    let rows = g.value(v).rows();
    if rows != mask.visible.len() || mask.n_tokens != cfg.encoder.n_tokens {
        return Err(Error::shape(format!(
            "{rows} visible features for a mask with {} visible of {} tokens",
            mask.visible.len(),
            mask.n_tokens
        )));
    }
    let x = linear(g, p, "dec.embed", v)?;
    let x = if mask.n_masked() > 0 {
        let token = p.get("dec.mask_token")?;
        let fill = g.gather_rows(token, &vec![0; mask.n_masked()])?;
        g.concat(&[x, fill], 0)?
    } else {
        x
    };
    let x = g.gather_rows(x, &mask.restore_order())?;
    let pos = p.get("dec.pos")?;
    let mut x = g.add(x, pos)?;
    for i in 0..cfg.dec_depth {
        x = block(g, p, &format!("dec.blk{i}"), x, cfg.dec_heads)?;
    }
    let x = norm(g, p, "dec.norm", x)?;
    let pred = linear(g, p, "dec.pred", x)?;
    let feat = linear(g, p, "dec.feat", x)?;
    Ok((feat, pred))
}

/// Three linear layers, GELU after the first two, unit-norm rows out.
/// `p` selects φ (online) or ψ (target) by binding.
pub fn project_head(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let h = linear(g, p, "head.l1", x)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, "head.l2", h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, "head.l3", h)?;
    g.l2_normalize(h, None)
}

/// Mean over token rows.
pub fn global_cls(g: &mut Graph, x: Var) -> Result<Var> {
    g.mean_rows(x)
}

#[derive(Clone, Copy, Debug)]
pub struct CasaOutput {
    /// Attention weights, query rows by source rows.
    pub att: Var,
    pub out: Var,
}

/// Cross-attention of `query` rows over `source` rows:
/// `ζ(softmax(LN(V) W_q (LN(src) W_k)^T / sqrt(C)) LN(src) W_ν)`.
pub fn casa_align(g: &mut Graph, p: &Bound, query: Var, source: Var) -> Result<CasaOutput> {
    if g.value(query).rows() == 0 || g.value(source).rows() == 0 {
        return Err(Error::invalid("CASA needs at least one query and one source row"));
    }
    let wq = p.get("casa.wq")?;
    let wk = p.get("casa.wk")?;
    let wv = p.get("casa.wv")?;
    let c = g.value(wq).cols();
    if g.value(wk).cols() != c || g.value(wv).cols() != c {
        return Err(Error::shape("CASA projections disagree on C"));
    }
    let qn = norm(g, p, "casa.ln_q", query)?;
    let q = g.matmul(qn, wq)?;
    let sn = norm(g, p, "casa.ln_kv", source)?;
    let k = g.matmul(sn, wk)?;
    let nu = g.matmul(sn, wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
    let att = g.softmax(logits)?;
    let mixed = g.matmul(att, nu)?;
    let out = linear(g, p, "casa.zeta", mixed)?;
    Ok(CasaOutput { att, out })
}

/// Outputs of one crop (Q or K) of a bundle.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    /// Online encoder features of the masked view's visible tokens.
    pub v: Var,
    /// φ-projected decoder features, all tokens.
    pub h: Var,
    /// Voxel predictions, all tokens.
    pub pred: Var,
    /// ψ-projected target features of the strongly augmented view.
    pub y: Var,
    pub cls_h: Var,
    pub cls_y: Var,
    /// Student and teacher CASA embeddings; `None` when CASA is off.
    pub s: Option<Var>,
    pub t: Option<Var>,
    pub att_s: Option<Var>,
    pub att_t: Option<Var>,
}

/// Q side holds `V_u, H_u, Y_w`; K side holds `V_r, H_r, Y_v`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardBundle {
    pub q: Branch,
    pub k: Branch,
}

#[allow(clippy::too_many_arguments)]
fn branch(
    g: &mut Graph,
    online: &Bound,
    target: &Bound,
    teacher_casa: &Bound,
    cfg: &ModelConfig,
    masked: (&Tensor, &MaskSpec),
    strong: &Tensor,
    use_casa: bool,
) -> Result<Branch> {
    let x = g.constant(masked.0.clone());
    let v = encode_visible(g, online, cfg, x, masked.1)?;
    let (feat, pred) = decode_full(g, online, cfg, v, masked.1)?;
    let h = project_head(g, online, feat)?;
    let xs = g.constant(strong.clone());
    let yt = encode_target(g, target, cfg, xs)?;
    let y = project_head(g, target, yt)?;
    let y = g.detach(y);
    let cls_h = global_cls(g, h)?;
    let cls_y = global_cls(g, y)?;
    let (mut s, mut t, mut att_s, mut att_t) = (None, None, None, None);
    if use_casa {
        let student = casa_align(g, online, v, h)?;
        let vq = g.detach(v);
        let teacher = casa_align(g, teacher_casa, vq, y)?;
        let tout = g.detach(teacher.out);
        s = Some(student.out);
        t = Some(tout);
        att_s = Some(student.att);
        att_t = Some(teacher.att);
    }
    Ok(Branch {
        v,
        h,
        pred,
        y,
        cls_h,
        cls_y,
        s,
        t,
        att_s,
        att_t,
    })
}

/// Full forward pass of one view bundle.
///
/// The teacher CASA call uses constant copies of the student's CASA
/// weights when they are shared and the EMA copies otherwise.
pub fn forward_bundle(
    g: &mut Graph,
    online: &Bound,
    target: &Bound,
    cfg: &ModelConfig,
    bundle: &ViewBundle,
    use_casa: bool,
) -> Result<ForwardBundle> {
    let teacher_casa = if cfg.casa_shared {
        online.detached(g, "casa.")
    } else {
        target.clone()
    };
    let q = branch(
        g,
        online,
        target,
        &teacher_casa,
        cfg,
        (&bundle.q_tokens, &bundle.mask_u),
        &bundle.q_strong,
        use_casa,
    )?;
    let k = branch(
        g,
        online,
        target,
        &teacher_casa,
        cfg,
        (&bundle.k_tokens, &bundle.mask_r),
        &bundle.k_strong,
        use_casa,
    )?;
    Ok(ForwardBundle { q, k })
}
