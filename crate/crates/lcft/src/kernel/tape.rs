//! Reverse-mode gradient tape over batched tensor ops.
//!
//! The tape records each forward op together with the cached inputs its
//! backward rule needs (weight copies for affine layers, history rows and
//! softmax weights for attention pooling). `backward` walks the record in
//! exact reverse order and accumulates gradients keyed by parameter name.
//! Embedding gradients stay sparse: only rows actually looked up by the
//! batch appear in the result.
//!
//! A tape is single-use: `backward` consumes the recorded pass and a second
//! call errors.

use super::loss::{loss_grad, loss_value, LossKind};
use super::tensor::Tensor;
use super::{Gradients, KernelError, ParamSet};

pub type NodeId = usize;

/// How history embeddings collapse to one vector per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    /// Constant batch input; no gradient flows here.
    Input,
    /// Row gather from an embedding table: `out[b] = table[ids[b]]`.
    Lookup {
        table: String,
        ids: Vec<usize>,
    },
    /// Mean or sum of history rows per sample; empty history yields zeros.
    Pool {
        table: String,
        hists: Vec<Vec<usize>>,
        kind: PoolKind,
    },
    /// Dot-product attention over history rows against a query node.
    /// Caches the gathered rows and the softmax weights for backward.
    AttnPool {
        table: String,
        hists: Vec<Vec<usize>>,
        query: NodeId,
        hist_rows: Vec<Vec<f64>>,
        weights: Vec<Vec<f64>>,
    },
    /// `x @ W + b` with named parameters; W is cached at record time.
    Affine {
        x: NodeId,
        w_name: String,
        b_name: Option<String>,
        w: Tensor,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    /// Column-wise concatenation of same-batch nodes.
    Concat {
        xs: Vec<NodeId>,
    },
    /// Elementwise sum of same-shape nodes.
    AddN {
        xs: Vec<NodeId>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of one forward pass.
#[derive(Debug, Clone)]
pub struct GradientTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Smallest |x| feeding any relu on this tape, or `None` when the
    /// graph has no relu. Finite-difference gradient checks are only valid
    /// when this margin comfortably exceeds the probe step.
    pub fn relu_input_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x].value.data() {
                    let a = v.abs();
                    margin = Some(margin.map_or(a, |m: f64| m.min(a)));
                }
            }
        }
        margin
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, KernelError> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Records a constant input tensor.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId, KernelError> {
        self.push(t, Op::Input)
    }

    /// Gathers `table[ids[b]]` into a `[batch, dim]` tensor.
    pub fn lookup(
        &mut self,
        params: &ParamSet,
        table: &str,
        ids: &[usize],
    ) -> Result<NodeId, KernelError> {
        let t = params.embedding(table)?;
        let dim = t.ncols();
        let rows = t.nrows();
        let mut out = Tensor::zeros(&[ids.len(), dim]);
        for (b, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(KernelError::IndexOutOfRange {
                    table: table.to_string(),
                    index: id,
                    rows,
                });
            }
            out.row_mut(b).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Lookup {
                table: table.to_string(),
                ids: ids.to_vec(),
            },
        )
    }

    /// Pools each sample's history rows into one vector. An empty history
    /// contributes the zero vector.
    pub fn pool(
        &mut self,
        params: &ParamSet,
        table: &str,
        hists: &[Vec<usize>],
        kind: PoolKind,
    ) -> Result<NodeId, KernelError> {
        let t = params.embedding(table)?;
        let dim = t.ncols();
        let rows = t.nrows();
        let mut out = Tensor::zeros(&[hists.len(), dim]);
        for (b, hist) in hists.iter().enumerate() {
            if hist.is_empty() {
                continue;
            }
            let row = out.row_mut(b);
            for &id in hist {
                if id >= rows {
                    return Err(KernelError::IndexOutOfRange {
                        table: table.to_string(),
                        index: id,
                        rows,
                    });
                }
                for (o, v) in row.iter_mut().zip(t.row(id)) {
                    *o += v;
                }
            }
            if kind == PoolKind::Mean {
                let inv = 1.0 / hist.len() as f64;
                for o in row.iter_mut() {
                    *o *= inv;
                }
            }
        }
        self.push(
            out,
            Op::Pool {
                table: table.to_string(),
                hists: hists.to_vec(),
                kind,
            },
        )
    }

    /// Attention pooling: per sample, softmax over `dot(query, hist_row)`
    /// scores weights the history rows. Empty history yields zeros.
    pub fn attn_pool(
        &mut self,
        params: &ParamSet,
        table: &str,
        hists: &[Vec<usize>],
        query: NodeId,
    ) -> Result<NodeId, KernelError> {
        let t = params.embedding(table)?;
        let dim = t.ncols();
        let rows = t.nrows();
        let q = &self.nodes[query].value;
        if q.nrows() != hists.len() || q.ncols() != dim {
            return Err(KernelError::ShapeMismatch {
                context: "attn_pool",
                expected: vec![hists.len(), dim],
                got: q.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[hists.len(), dim]);
        let mut all_weights = Vec::with_capacity(hists.len());
        let mut all_rows = Vec::with_capacity(hists.len());
        for (b, hist) in hists.iter().enumerate() {
            if hist.is_empty() {
                all_weights.push(Vec::new());
                all_rows.push(Vec::new());
                continue;
            }
            let qb = q.row(b);
            let mut scores = Vec::with_capacity(hist.len());
            let mut rows_flat = Vec::with_capacity(hist.len() * dim);
            for &id in hist {
                if id >= rows {
                    return Err(KernelError::IndexOutOfRange {
                        table: table.to_string(),
                        index: id,
                        rows,
                    });
                }
                let r = t.row(id);
                let mut s = 0.0;
                for (a, b2) in qb.iter().zip(r) {
                    s += a * b2;
                }
                scores.push(s);
                rows_flat.extend_from_slice(r);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let norm: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= norm;
            }
            let row = out.row_mut(b);
            for (j, w) in weights.iter().enumerate() {
                for (o, v) in row.iter_mut().zip(&rows_flat[j * dim..(j + 1) * dim]) {
                    *o += w * v;
                }
            }
            all_weights.push(weights);
            all_rows.push(rows_flat);
        }
        self.push(
            out,
            Op::AttnPool {
                table: table.to_string(),
                hists: hists.to_vec(),
                query,
                hist_rows: all_rows,
                weights: all_weights,
            },
        )
    }

    /// `x @ W (+ b)` with `W: [in, out]` and optional `b: [out]`.
    pub fn affine(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        w_name: &str,
        b_name: Option<&str>,
    ) -> Result<NodeId, KernelError> {
        let w = params.get(w_name)?.clone();
        let xv = &self.nodes[x].value;
        let (batch, d_in) = (xv.nrows(), xv.ncols());
        if w.shape().len() != 2 || w.shape()[0] != d_in {
            return Err(KernelError::ShapeMismatch {
                context: "affine",
                expected: vec![d_in],
                got: w.shape().to_vec(),
            });
        }
        let d_out = w.shape()[1];
        let mut out = Tensor::zeros(&[batch, d_out]);
        for b in 0..batch {
            let xr = xv.row(b);
            let or = out.row_mut(b);
            for (i, xi) in xr.iter().enumerate() {
                let wr = w.row(i);
                for (o, wv) in or.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
        }
        if let Some(bn) = b_name {
            let bias = params.get(bn)?;
            if bias.len() != d_out {
                return Err(KernelError::ShapeMismatch {
                    context: "affine bias",
                    expected: vec![d_out],
                    got: bias.shape().to_vec(),
                });
            }
            for b in 0..batch {
                for (o, bv) in out.row_mut(b).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        self.push(
            out,
            Op::Affine {
                x,
                w_name: w_name.to_string(),
                b_name: b_name.map(|s| s.to_string()),
                w,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        let v = &self.nodes[x].value;
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&a| a.max(0.0)).collect())?;
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        let v = &self.nodes[x].value;
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&a| sigmoid(a)).collect())?;
        self.push(out, Op::Sigmoid { x })
    }

    /// Concatenates `[batch, d_k]` nodes along the feature axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, KernelError> {
        let batch = self.nodes[xs[0]].value.nrows();
        let mut total = 0;
        for &x in xs {
            let v = &self.nodes[x].value;
            if v.nrows() != batch {
                return Err(KernelError::ShapeMismatch {
                    context: "concat",
                    expected: vec![batch],
                    got: v.shape().to_vec(),
                });
            }
            total += v.ncols();
        }
        let mut out = Tensor::zeros(&[batch, total]);
        for b in 0..batch {
            let row = out.row_mut(b);
            let mut at = 0;
            for &x in xs {
                let v = &self.nodes[x].value;
                let w = v.ncols();
                row[at..at + w].copy_from_slice(v.row(b));
                at += w;
            }
        }
        self.push(out, Op::Concat { xs: xs.to_vec() })
    }

    /// Elementwise sum of same-shape nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId, KernelError> {
        let shape = self.nodes[xs[0]].value.shape().to_vec();
        for &x in &xs[1..] {
            if self.nodes[x].value.shape() != shape.as_slice() {
                return Err(KernelError::ShapeMismatch {
                    context: "add_n",
                    expected: shape,
                    got: self.nodes[x].value.shape().to_vec(),
                });
            }
        }
        let mut out = Tensor::zeros(&shape);
        for &x in xs {
            for (o, v) in out.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                *o += v;
            }
        }
        self.push(out, Op::AddN { xs: xs.to_vec() })
    }

    /// Seeds the batch-mean loss gradient at `output` and replays the tape
    /// backward. Returns the mean per-sample loss and the gradients keyed by
    /// parameter name; embedding tables get entries only for touched rows.
    pub fn backward(
        &mut self,
        output: NodeId,
        loss: LossKind,
        labels: &Tensor,
    ) -> Result<(f64, Gradients), KernelError> {
        if self.consumed {
            return Err(KernelError::TapeConsumed);
        }
        self.consumed = true;

        let preds = &self.nodes[output].value;
        let batch = preds.len();
        if labels.len() != batch {
            return Err(KernelError::ShapeMismatch {
                context: "backward labels",
                expected: vec![batch],
                got: labels.shape().to_vec(),
            });
        }
        let inv_b = 1.0 / batch as f64;
        let mut total = 0.0;
        let mut seed = Tensor::zeros(preds.shape());
        for i in 0..batch {
            let p = preds.data()[i];
            let y = labels.data()[i];
            total += loss_value(loss, p, y)?;
            seed.data_mut()[i] = loss_grad(loss, p, y) * inv_b;
        }
        let mean_loss = total * inv_b;
        if !mean_loss.is_finite() {
            return Err(KernelError::NonFinite { context: "loss" });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(seed);
        let mut out = Gradients::default();

        for i in (0..=output).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Lookup { table, ids } => {
                    let dim = g.ncols();
                    let slot = out.sparse_slot(table, dim);
                    for (b, &id) in ids.iter().enumerate() {
                        slot.accumulate(id, g.row(b));
                    }
                }
                Op::Pool { table, hists, kind } => {
                    let dim = g.ncols();
                    let slot = out.sparse_slot(table, dim);
                    let mut scaled = vec![0.0; dim];
                    for (b, hist) in hists.iter().enumerate() {
                        if hist.is_empty() {
                            continue;
                        }
                        let w = match kind {
                            PoolKind::Mean => 1.0 / hist.len() as f64,
                            PoolKind::Sum => 1.0,
                        };
                        for (s, gv) in scaled.iter_mut().zip(g.row(b)) {
                            *s = gv * w;
                        }
                        for &id in hist {
                            slot.accumulate(id, &scaled);
                        }
                    }
                }
                Op::AttnPool {
                    table,
                    hists,
                    query,
                    hist_rows,
                    weights,
                } => {
                    let dim = g.ncols();
                    let query = *query;
                    let mut dq = Tensor::zeros(self.nodes[query].value.shape());
                    {
                        let qv = &self.nodes[query].value;
                        let slot = out.sparse_slot(table, dim);
                        for (b, hist) in hists.iter().enumerate() {
                            if hist.is_empty() {
                                continue;
                            }
                            let gb = g.row(b);
                            let qb = qv.row(b);
                            let rows = &hist_rows[b];
                            let ws = &weights[b];
                            // s = sum_k a_k <g, v_k>
                            let mut dots = Vec::with_capacity(hist.len());
                            let mut s = 0.0;
                            for (j, &a) in ws.iter().enumerate() {
                                let v = &rows[j * dim..(j + 1) * dim];
                                let mut d = 0.0;
                                for (x, y) in gb.iter().zip(v) {
                                    d += x * y;
                                }
                                dots.push(d);
                                s += a * d;
                            }
                            let dqb = dq.row_mut(b);
                            for (j, &id) in hist.iter().enumerate() {
                                let a = ws[j];
                                let ds = a * (dots[j] - s);
                                let v = &rows[j * dim..(j + 1) * dim];
                                // dV_j = a_j * g + ds_j * q
                                let mut dv = vec![0.0; dim];
                                for k in 0..dim {
                                    dv[k] = a * gb[k] + ds * qb[k];
                                    dqb[k] += ds * v[k];
                                }
                                slot.accumulate(id, &dv);
                            }
                        }
                    }
                    accumulate_node(&mut grads, query, dq);
                }
                Op::Affine {
                    x,
                    w_name,
                    b_name,
                    w,
                } => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let batch = xv.nrows();
                    let d_out = w.shape()[1];
                    let mut dx = Tensor::zeros(xv.shape());
                    let gw = out.dense_slot(w_name, w.shape());
                    for b in 0..batch {
                        let gr = g.row(b);
                        let xr = xv.row(b);
                        for (i, &xi) in xr.iter().enumerate() {
                            let wr = w.row(i);
                            let gwr = gw.row_mut(i);
                            let mut acc = 0.0;
                            for ((&gv, &wv), gw_slot) in gr.iter().zip(wr).zip(gwr.iter_mut()) {
                                acc += gv * wv;
                                *gw_slot += xi * gv;
                            }
                            dx.row_mut(b)[i] += acc;
                        }
                    }
                    if let Some(bn) = b_name {
                        let gb = out.dense_slot(bn, &[d_out]);
                        for b in 0..batch {
                            for (s, gv) in gb.data_mut().iter_mut().zip(g.row(b)) {
                                *s += gv;
                            }
                        }
                    }
                    accumulate_node(&mut grads, x, dx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let mut dx = Tensor::zeros(xv.shape());
                    for ((d, &xi), &gi) in dx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        if xi > 0.0 {
                            *d = gi;
                        }
                    }
                    accumulate_node(&mut grads, x, dx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let pv = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(pv.shape());
                    for ((d, &p), &gi) in dx.data_mut().iter_mut().zip(pv.data()).zip(g.data()) {
                        *d = gi * p * (1.0 - p);
                    }
                    accumulate_node(&mut grads, x, dx);
                }
                Op::Concat { xs } => {
                    let xs = xs.clone();
                    let batch = g.nrows();
                    let mut at = 0;
                    for &x in &xs {
                        let w = self.nodes[x].value.ncols();
                        let mut dx = Tensor::zeros(self.nodes[x].value.shape());
                        for b in 0..batch {
                            dx.row_mut(b).copy_from_slice(&g.row(b)[at..at + w]);
                        }
                        at += w;
                        accumulate_node(&mut grads, x, dx);
                    }
                }
                Op::AddN { xs } => {
                    for &x in &xs.clone() {
                        accumulate_node(&mut grads, x, g.clone());
                    }
                }
            }
        }
        Ok((mean_loss, out))
    }
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate_node(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Lookup { .. } => "lookup",
        Op::Pool { .. } => "pool",
        Op::AttnPool { .. } => "attn_pool",
        Op::Affine { .. } => "affine",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Concat { .. } => "concat",
        Op::AddN { .. } => "add_n",
    }
}
