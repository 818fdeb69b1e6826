//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so the node list
//! is already a topological order and the backward sweep is a single reverse
//! pass. Nodes created with [`Graph::constant`] (or [`Graph::detach`]) never
//! receive gradient; this is how the teacher branches are frozen.
//!
//! Most operations work on 2-D `[rows, cols]` values. Row-wise operations
//! (softmax, layer norm, l2 normalisation) act on the last axis.

use crate::error::{Error, Result};
use crate::tensor::{self, lanes, matmul_nt, matmul_tn, row_moments, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    L2Normalize { x: Var, eps: Option<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Values every `detach` call produced, in call order.
    detached: Vec<Tensor>,
    /// When set, the `k`-th `detach` call returns entry `k` instead of the
    /// current value of its input.
    frozen: Option<Vec<Tensor>>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `value` when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, value: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| zeros_like(value))
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("valid shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.frozen {
            Some(f) if k < f.len() && f[k].shape() == self.value(v).shape() => f[k].clone(),
            _ => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    /// A graph whose stop-gradient nodes replay `values` in order, so the
    /// detached branches stay at the point they were recorded at.
    pub fn with_frozen_detach(values: Vec<Tensor>) -> Self {
        Graph {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Values of the stop-gradient nodes built so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        let value = value.ensure_finite(what)?;
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(v, Op::Mul(a, b), "mul")
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        self.record(out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.record(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        self.record(v, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.record(v, Op::Reshape(x), "reshape")
    }

    /// Concatenates 2-D values along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::invalid("concat needs parts and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.value(*p).dims2())
            .collect::<Result<_>>()?;
        let value = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat rows with differing widths"));
            }
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
            Tensor::new(vec![dims.iter().map(|d| d.0).sum(), c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat columns with differing heights"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        self.record(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("columns {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        self.record(v, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Row gather; indices may repeat (gradients are scatter-added).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(index)?;
        self.record(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(tensor::gelu);
        self.record(v, Op::Gelu(x), "gelu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.record(v, Op::Mean(x), "mean")
    }

    /// Average over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.record(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), "mean_rows")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|v| v * s);
        self.record(v, Op::Scale(x, s), "scale")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let v = tensor::softmax(xv, xv.ndim().saturating_sub(1))?;
        self.record(v, Op::Softmax(x), "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.record(v, Op::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    /// Unit-norm rows; see [`tensor::l2_normalize`] for the `eps` contract.
    pub fn l2_normalize(&mut self, x: Var, eps: Option<f64>) -> Result<Var> {
        let xv = self.value(x);
        let v = tensor::l2_normalize(xv, xv.ndim().saturating_sub(1), eps)?;
        self.record(v, Op::L2Normalize { x, eps }, "l2_normalize")
    }

    /// Mean softmax cross-entropy of `logits[r, k]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, k) = lv.dims2()?;
        if targets.len() != r || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape("cross_entropy targets do not match logits"));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / r as f64);
        self.record(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = zeros_like(lv);
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.zip_map(bv, |g, x| g * x)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.zip_map(av, |g, x| g * x)?);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, gy.clone());
                if self.wants(*bias) {
                    let bv = self.value(*bias);
                    let c = bv.len();
                    let mut gb = zeros_like(bv);
                    for (i, g) in gy.data().iter().enumerate() {
                        gb.data_mut()[i % c] += g;
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if self.wants(*a) {
                    let mut ga = zeros_like(av);
                    matmul_nt(gy.data(), bv.data(), ga.data_mut(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = zeros_like(bv);
                    matmul_tn(av.data(), gy.data(), gb.data_mut(), k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, gy.transpose()?);
            }
            Op::Reshape(x) => {
                let g = gy.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, g);
            }
            Op::Concat { parts, axis } => {
                let mut row_off = 0;
                let mut col_off = 0;
                let total_cols = gy.cols();
                for p in parts {
                    let pv = self.value(*p);
                    let (r, c) = pv.dims2()?;
                    if self.wants(*p) {
                        let mut g = zeros_like(pv);
                        for i in 0..r {
                            let src = if *axis == 0 {
                                &gy.data()[(row_off + i) * total_cols..(row_off + i + 1) * total_cols]
                            } else {
                                &gy.data()[i * total_cols + col_off..i * total_cols + col_off + c]
                            };
                            g.data_mut()[i * c..(i + 1) * c].copy_from_slice(src);
                        }
                        self.accumulate(grads, *p, g);
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2()?;
                let len = gy.cols();
                let mut g = zeros_like(xv);
                for i in 0..r {
                    g.data_mut()[i * c + start..i * c + start + len].copy_from_slice(gy.row(i));
                }
                self.accumulate(grads, *x, g);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut g = zeros_like(xv);
                for (k, &i) in index.iter().enumerate() {
                    for (dst, src) in g.data_mut()[i * c..(i + 1) * c].iter_mut().zip(gy.row(k)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Gelu(x) => {
                let g = gy.zip_map(self.value(*x), |g, v| g * tensor::gelu_grad(v))?;
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let g = xv.map(|_| gy.item());
                self.accumulate(grads, *x, g);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = gy.item() / xv.len() as f64;
                self.accumulate(grads, *x, xv.map(|_| s));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2()?;
                let mut g = zeros_like(xv);
                for i in 0..r {
                    for j in 0..c {
                        g.data_mut()[i * c + j] = gy.data()[j] / r as f64;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gy.map(|g| g * s));
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut g = zeros_like(y);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = gy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let mut gx = zeros_like(xv);
                let mut gg = zeros_like(gv);
                let mut gb = zeros_like(gv);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, rstd) = row_moments(row, *eps);
                    let grow = gy.row(r);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        gg.data_mut()[j] += grow[j] * xhat[j];
                        gb.data_mut()[j] += grow[j];
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x);
                let (_, len, _) = lanes(xv.shape(), xv.ndim().saturating_sub(1))?;
                let mut g = zeros_like(xv);
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = y.row(r);
                    let gr = gy.row(r);
                    let guarded = eps.is_some_and(|e| norm < e);
                    let denom = if guarded { eps.unwrap() } else { norm };
                    let dot: f64 = if guarded {
                        0.0
                    } else {
                        yr.iter().zip(gr).map(|(a, b)| a * b).sum()
                    };
                    for j in 0..len {
                        g.data_mut()[r * len + j] = (gr[j] - yr[j] * dot) / denom;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let probs = tensor::softmax(lv, 1)?;
                let n = targets.len() as f64;
                let s = gy.item() / n;
                let k = lv.cols();
                let mut g = probs;
                for (i, &t) in targets.iter().enumerate() {
                    g.data_mut()[i * k + t] -= 1.0;
                }
                for v in g.data_mut() {
                    *v *= s;
                }
                self.accumulate(grads, *logits, g);
            }
        }
        Ok(())
    }
}
