//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the nodes once in reverse and consumes the tape. Nodes whose inputs
//! are all constants are never visited.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gelu, gelu_grad, log_sum_exp, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    /// Rows of a parameter table; gradient is scattered straight into the store.
    Embedding { param: ParamId, idx: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    Log(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of non-parameter leaves produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Embedding lookup: rows `ids` of the parameter table `id`.
    pub fn embedding(&mut self, store: &ParamStore, id: ParamId, ids: &[usize]) -> Result<Var> {
        let p = store.get(id);
        let value = p.value.gather_rows(ids)?;
        Ok(self.push(value, Op::Embedding { param: id, idx: ids.to_vec() }, p.trainable))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x + bias` with `bias` broadcast along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_bias(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let value = x.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(Error::Dimension(format!("concat_cols: row count mismatch at {:?}", t.shape())));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(Error::Dimension(format!("concat_rows: column count mismatch at {:?}", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `idx` of a matrix; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[B]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.shape().len() != 2 || l.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} vs {} targets",
                l.shape(),
                targets.len()
            )));
        }
        if !l.is_finite() {
            return Err(Error::Numeric("cross_entropy logits contain NaN or infinity".into()));
        }
        let v = l.cols();
        let mut losses = Vec::with_capacity(targets.len());
        let mut probs = l.data().to_vec();
        for (b, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("target {t} out of range for {v} classes")));
            }
            let row = l.row(b);
            losses.push(log_sum_exp(row) - row[t]);
            softmax_in_place(&mut probs[b * v..(b + 1) * v]);
        }
        let value = Tensor::new(vec![targets.len()], losses)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Mean cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, targets)?;
        Ok(self.mean(rows))
    }

    /// Reverse pass from a scalar. Parameter gradients are accumulated into
    /// `store`; gradients of plain leaves are returned.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded computation".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => store.accumulate(*id, &g),
                Op::Embedding { param, idx } => store.accumulate_rows(*param, idx, &g),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].requires_grad {
                        // dA = G B^T
                        let mut ga = vec![0.0; m * k];
                        let bd = bv.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T G
                        let mut gb = vec![0.0; k * n];
                        let ad = av.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let a_rp = ad[r * k + p];
                                if a_rp == 0.0 {
                                    continue;
                                }
                                for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += a_rp * x;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Transpose(a) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?.transpose()?;
                    accumulate(&mut grads, *a, gt.data());
                }
                Op::Add(a, b) => {
                    accumulate_if(&self.nodes, &mut grads, *a, &g);
                    accumulate_if(&self.nodes, &mut grads, *b, &g);
                }
                Op::AddBias(x, b) => {
                    accumulate_if(&self.nodes, &mut grads, *x, &g);
                    if self.nodes[b.0].requires_grad {
                        let c = self.nodes[b.0].value.numel();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    if self.nodes[a.0].requires_grad {
                        let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Gelu(a) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut ga = vec![0.0; y.len()];
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SliceCols { x, start } => {
                    let src = &self.nodes[x.0].value;
                    let (m, n) = (src.rows(), src.cols());
                    let len = node.value.cols();
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SliceRows { x, start } => {
                    let src = &self.nodes[x.0].value;
                    let n = src.cols();
                    let mut gx = vec![0.0; src.numel()];
                    gx[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].requires_grad {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut grads, p, &gp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.numel();
                        if self.nodes[p.0].requires_grad {
                            accumulate(&mut grads, p, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let src = &self.nodes[x.0].value;
                    let n = src.cols();
                    let mut gx = vec![0.0; src.numel()];
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, v) in gx[r * n..(r + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, &g),
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(&mut grads, *x, &vec![g[0] / n as f64; n]);
                }
                Op::CrossEntropyRows { logits, targets, probs } => {
                    let v = self.nodes[logits.0].value.cols();
                    let mut gl = probs.clone();
                    for (b, &t) in targets.iter().enumerate() {
                        let row = &mut gl[b * v..(b + 1) * v];
                        row[t] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= g[b];
                        }
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_if(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if nodes[v.0].requires_grad {
        accumulate(grads, v, g);
    }
}
