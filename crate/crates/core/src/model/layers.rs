//! Graph building blocks over named parameters.

use super::config::LN_EPS;
use super::params::Bound;
use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// `x W + b` with parameters `{prefix}.w`, `{prefix}.b`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

pub fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Multi-head self-attention over the rows of `x`.
pub fn self_attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let dim = g.value(x).cols();
    let dh = dim / heads;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, dim + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * dim + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let att = g.softmax(logits)?;
        outs.push(g.matmul(att, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, p, &format!("{prefix}.proj"), cat)
}

/// Pre-norm transformer block.
pub fn block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(g, p, prefix, h, heads)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{prefix}.fc2"), h)?;
    g.add(x, h)
}
