//! Reverse-mode differentiation over the small fixed set of operations the
//! model needs. A [`Graph`] records forward values; [`Graph::backward`]
//! returns parameter gradients without mutating the store.

use std::collections::HashMap;
use std::ops::Range;

use log::warn;
use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Query `i` attends to the contiguous key range `ranges[i]`.
    Ranges(Vec<Range<usize>>),
    /// Explicit `rows × cols` boolean matrix.
    Dense {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask::Ranges(vec![0..cols; rows])
    }

    /// Row `i` attends to keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Mask::Ranges((0..n).map(|i| 0..i + 1).collect())
    }

    /// Row `i` attends only to itself.
    pub fn diagonal(n: usize) -> Self {
        Mask::Ranges((0..n).map(|i| i..i + 1).collect())
    }

    /// Row `i` attends to keys `0..lens[i]`.
    pub fn prefix(lens: &[usize]) -> Self {
        Mask::Ranges(lens.iter().map(|&l| 0..l).collect())
    }

    /// Block-diagonal mask over `count` consecutive blocks of `len` rows.
    pub fn blocks(count: usize, len: usize) -> Self {
        Mask::Ranges(
            (0..count * len)
                .map(|i| {
                    let b = i / len;
                    b * len..(b + 1) * len
                })
                .collect(),
        )
    }

    pub fn from_bool(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::invalid("mask size does not match its shape"));
        }
        Ok(Mask::Dense {
            rows,
            cols,
            allowed,
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            Mask::Ranges(r) => r.len(),
            Mask::Dense { rows, .. } => *rows,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::Ranges(r) => r[i].contains(&j),
            Mask::Dense { cols, allowed, .. } => allowed[i * cols + j],
        }
    }

    fn fill_keys(&self, i: usize, n_keys: usize, buf: &mut Vec<usize>) {
        buf.clear();
        match self {
            Mask::Ranges(r) => buf.extend(r[i].start.min(n_keys)..r[i].end.min(n_keys)),
            Mask::Dense { cols, allowed, .. } => buf.extend(
                allowed[i * cols..(i + 1) * cols]
                    .iter()
                    .enumerate()
                    .filter(|(j, &a)| a && *j < n_keys)
                    .map(|(j, _)| j),
            ),
        }
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = match self {
            Mask::Ranges(r) => r.len() == rows && r.iter().all(|k| k.end <= cols),
            Mask::Dense { rows: r, cols: c, .. } => *r == rows && *c == cols,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "mask does not fit a {rows}x{cols} attention"
            )))
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
    },
    GatherRows {
        src: NodeId,
        rows: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    SegmentMean {
        src: NodeId,
        segments: Vec<Range<usize>>,
    },
    WeightedRows {
        src: NodeId,
        terms: Vec<Vec<(usize, f64)>>,
    },
    LayerNorm {
        src: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        mask: Mask,
        weights: Vec<f64>,
        offsets: Vec<usize>,
    },
    Dropout {
        src: NodeId,
        keep: Vec<f64>,
    },
    SampledNll {
        logits: NodeId,
        cols: Vec<Vec<usize>>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A forward computation over a read-only [`ParamStore`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    training: bool,
    corrupt_backward: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, training: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            training,
            corrupt_backward: false,
        }
    }

    /// Debug hook: scale every gradient reaching a parameter by 1.5. Used as
    /// a negative control for gradient checking.
    pub fn with_corrupted_backward(mut self, corrupt: bool) -> Self {
        self.corrupt_backward = corrupt;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let (r, c) = (value.rows(), value.cols());
        let value = value.reshape(vec![r, c]).expect("same element count");
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let v = self.store.value(id);
        let value = v
            .clone()
            .reshape(vec![v.rows(), v.cols()])
            .expect("same element count");
        let n = self.push(value, Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    /// Row gather from an embedding table; backward scatters into the table.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let t = self.store.value(table);
        let (v, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: v,
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = &self.nodes[src.0].value;
        let (n, d) = (s.rows(), s.cols());
        if rows.is_empty() {
            return Err(Error::invalid("row gather with no rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "gathered tensor",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(s.row_slice(r));
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul_nt shape mismatch {m}x{k} vs {n}x{k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::invalid(format!(
                "add shape mismatch {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims(a);
        if self.dims(bias) != (1, c) {
            return Err(Error::invalid("bias must be a single row matching columns"));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_in_place(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::invalid("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean of consecutive row segments: output row `s` averages
    /// `segments[s]` of the input.
    pub fn segment_mean(&mut self, src: NodeId, segments: Vec<Range<usize>>) -> Result<NodeId> {
        let (n, d) = self.dims(src);
        if segments.is_empty() || segments.iter().any(|s| s.is_empty() || s.end > n) {
            return Err(Error::invalid("invalid segment list"));
        }
        let s = self.value(src);
        let mut out = vec![0.0; segments.len() * d];
        for (o, seg) in out.chunks_mut(d).zip(&segments) {
            for r in seg.clone() {
                for (x, y) in o.iter_mut().zip(s.row_slice(r)) {
                    *x += y;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            o.iter_mut().for_each(|x| *x *= inv);
        }
        let value = Tensor::matrix(segments.len(), d, out)?;
        Ok(self.push(value, Op::SegmentMean { src, segments }))
    }

    /// Sparse row mixing: output row `i` is `Σ w · src[j]` over
    /// `terms[i]`. A single term with weight 1 copies its row bitwise.
    pub fn weighted_rows(&mut self, src: NodeId, terms: Vec<Vec<(usize, f64)>>) -> Result<NodeId> {
        let (n, d) = self.dims(src);
        if terms.is_empty() || terms.iter().any(|t| t.is_empty() || t.iter().any(|&(j, _)| j >= n)) {
            return Err(Error::invalid("invalid weighted row list"));
        }
        let s = self.value(src);
        let mut out = vec![0.0; terms.len() * d];
        for (o, row) in out.chunks_mut(d).zip(&terms) {
            let (j0, w0) = row[0];
            for (x, y) in o.iter_mut().zip(s.row_slice(j0)) {
                *x = w0 * y;
            }
            for &(j, w) in &row[1..] {
                for (x, y) in o.iter_mut().zip(s.row_slice(j)) {
                    *x += w * y;
                }
            }
        }
        let value = Tensor::matrix(terms.len(), d, out)?;
        Ok(self.push(value, Op::WeightedRows { src, terms }))
    }

    /// Per-row layer normalisation with learnable `gain` and `bias` rows.
    pub fn layer_norm(&mut self, src: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims(src);
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(Error::invalid("layer norm gain/bias shape mismatch"));
        }
        let x = self.value(src);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                src,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled-dot-product attention core without projections:
    /// for each head, softmax over the allowed keys of `scale · q·k`, then
    /// the weighted sum of values. Heads occupy consecutive column blocks.
    /// A query row with no allowed key produces zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        mask: Mask,
    ) -> Result<NodeId> {
        let (n, d) = self.dims(q);
        let (s, dk) = self.dims(k);
        if dk != d || self.dims(v) != (s, d) {
            return Err(Error::invalid("attention q/k/v shape mismatch"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "model dimension {d} not divisible by {heads} heads"
            )));
        }
        mask.check(n, s)?;
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; n * d];
        let mut weights = Vec::new();
        let mut offsets = Vec::with_capacity(heads * n + 1);
        let mut keys = Vec::new();
        let mut empty_rows = 0usize;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                offsets.push(weights.len());
                mask.fill_keys(i, s, &mut keys);
                if keys.is_empty() {
                    empty_rows += 1;
                    continue;
                }
                let qi = &qv.row_slice(i)[cols.clone()];
                let start = weights.len();
                let mut max = f64::NEG_INFINITY;
                for &j in &keys {
                    let kj = &kv.row_slice(j)[cols.clone()];
                    let logit = scale * dot(qi, kj);
                    max = max.max(logit);
                    weights.push(logit);
                }
                let mut total = 0.0;
                for w in &mut weights[start..] {
                    *w = (*w - max).exp();
                    total += *w;
                }
                let o = &mut out[i * d + cols.start..i * d + cols.end];
                for (w, &j) in weights[start..].iter_mut().zip(&keys) {
                    *w /= total;
                    let vj = &vv.row_slice(j)[cols.clone()];
                    for (x, y) in o.iter_mut().zip(vj) {
                        *x += *w * y;
                    }
                }
            }
        }
        offsets.push(weights.len());
        if empty_rows > 0 {
            warn!("attention: {empty_rows} query rows have no attendable key; passing through");
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                mask,
                weights,
                offsets,
            },
        ))
    }

    /// Attention weights of the most recent computation of node `id`, as a
    /// dense `heads × n × s` array with zeros for masked pairs.
    pub fn attention_weights(&self, id: NodeId) -> Option<Vec<Vec<Vec<f64>>>> {
        let Op::Attention {
            q,
            k,
            heads,
            mask,
            weights,
            offsets,
            ..
        } = &self.nodes[id.0].op
        else {
            return None;
        };
        let (n, _) = self.dims(*q);
        let (s, _) = self.dims(*k);
        let mut keys = Vec::new();
        let mut out = vec![vec![vec![0.0; s]; n]; *heads];
        for (h, head) in out.iter_mut().enumerate() {
            for (i, row) in head.iter_mut().enumerate() {
                mask.fill_keys(i, s, &mut keys);
                let w = &weights[offsets[h * n + i]..offsets[h * n + i + 1]];
                for (&j, &a) in keys.iter().zip(w) {
                    row[j] = a;
                }
            }
        }
        Some(out)
    }

    /// Inverted dropout; identity outside training mode or when `rate == 0`.
    pub fn dropout(&mut self, src: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(src);
        }
        let scale = 1.0 / (1.0 - rate);
        let mut value = self.value(src).clone();
        let keep: Vec<f64> = (0..value.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        for (x, m) in value.data_mut().iter_mut().zip(&keep) {
            *x *= m;
        }
        Ok(self.push(value, Op::Dropout { src, keep }))
    }

    /// Mean over rows of the sampled-softmax negative log likelihood. Row `i`
    /// scores the columns `cols[i]`, whose first entry is the positive.
    pub fn sampled_nll(&mut self, logits: NodeId, cols: Vec<Vec<usize>>) -> Result<NodeId> {
        let (m, c) = self.dims(logits);
        if cols.len() != m {
            return Err(Error::invalid("one candidate list per logit row required"));
        }
        if cols.iter().any(|cs| cs.len() < 2 || cs.iter().any(|&j| j >= c)) {
            return Err(Error::invalid(
                "candidate lists need a positive, at least one negative and valid columns",
            ));
        }
        let l = self.value(logits);
        let mut probs = Vec::new();
        let mut total = 0.0;
        for (i, cs) in cols.iter().enumerate() {
            let row = l.row_slice(i);
            let max = cs.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = cs.iter().map(|&j| (row[j] - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[cs[0]];
            probs.extend(cs.iter().map(|&j| (row[j] - lse).exp()));
        }
        let value = Tensor::row(vec![total / m as f64]);
        Ok(self.push(
            value,
            Op::SampledNll {
                logits,
                cols,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::row(vec![total]), Op::Sum(a))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// that contributed to it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::with_len(self.store.len());
        let leaf_scale = if self.corrupt_backward { 1.5 } else { 1.0 };
        let mut keys = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let slot = out.slot(*pid, self.store.value(*pid).shape());
                    for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                        *s += leaf_scale * v;
                    }
                }
                Op::Embed { table, ids } => {
                    let slot = out.slot(*table, self.store.value(*table).shape());
                    let d = g.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut slot.data_mut()[id * d..(id + 1) * d];
                        for (s, v) in dst.iter_mut().zip(g.row_slice(r)) {
                            *s += leaf_scale * v;
                        }
                    }
                }
                Op::GatherRows { src, rows } => {
                    let dst = grad_slot(&mut grads, self, *src);
                    let d = g.cols();
                    for (r, &row) in rows.iter().enumerate() {
                        let target = &mut dst.data_mut()[row * d..(row + 1) * d];
                        for (s, v) in target.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    // dA += G · Bᵀ
                    let bv = self.value(*b).data();
                    let da = grad_slot(&mut grads, self, *a);
                    gemm(m, n, k, g.data(), false, bv, true, da.data_mut(), 1.0);
                    // dB += Aᵀ · G
                    let av = self.value(*a).data();
                    let db = grad_slot(&mut grads, self, *b);
                    gemm(k, m, n, av, true, g.data(), false, db.data_mut(), 1.0);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    // C = A·Bᵀ: dA += G·B, dB += Gᵀ·A
                    let bv = self.value(*b).data();
                    let da = grad_slot(&mut grads, self, *a);
                    gemm(m, n, k, g.data(), false, bv, false, da.data_mut(), 1.0);
                    let av = self.value(*a).data();
                    let db = grad_slot(&mut grads, self, *b);
                    gemm(n, m, k, g.data(), true, av, false, db.data_mut(), 1.0);
                }
                Op::Add(a, b) => {
                    grad_slot(&mut grads, self, *a).add_assign(&g);
                    grad_slot(&mut grads, self, *b).add_assign(&g);
                }
                Op::AddRow(a, bias) => {
                    grad_slot(&mut grads, self, *a).add_assign(&g);
                    let c = g.cols();
                    let db = grad_slot(&mut grads, self, *bias);
                    for row in g.data().chunks(c) {
                        for (s, v) in db.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let da = grad_slot(&mut grads, self, *a);
                    for (x, v) in da.data_mut().iter_mut().zip(g.data()) {
                        *x += s * v;
                    }
                }
                Op::Relu(a) => {
                    let out_v = node.value.data();
                    let da = grad_slot(&mut grads, self, *a);
                    for ((x, v), o) in da.data_mut().iter_mut().zip(g.data()).zip(out_v) {
                        if *o > 0.0 {
                            *x += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let total = g.cols();
                        let dp = grad_slot(&mut grads, self, p);
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            for (s, v) in dp.row_slice_mut(r).iter_mut().zip(src) {
                                *s += v;
                            }
                        }
                        offset += w;
                    }
                }
                Op::WeightedRows { src, terms } => {
                    let dst = grad_slot(&mut grads, self, *src);
                    let d = g.cols();
                    for (r, row) in terms.iter().enumerate() {
                        for &(j, w) in row {
                            let target = &mut dst.data_mut()[j * d..(j + 1) * d];
                            for (s, v) in target.iter_mut().zip(g.row_slice(r)) {
                                *s += w * v;
                            }
                        }
                    }
                }
                Op::SegmentMean { src, segments } => {
                    let d = g.cols();
                    let ds = grad_slot(&mut grads, self, *src);
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        for r in seg.clone() {
                            let dst = &mut ds.data_mut()[r * d..(r + 1) * d];
                            for (x, v) in dst.iter_mut().zip(g.row_slice(s)) {
                                *x += inv * v;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    src,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (n, d) = (g.rows(), g.cols());
                    let gv = self.value(*gain).data().to_vec();
                    {
                        let dg = grad_slot(&mut grads, self, *gain);
                        for r in 0..n {
                            for c in 0..d {
                                dg.data_mut()[c] += g.data()[r * d + c] * normalized[r * d + c];
                            }
                        }
                    }
                    {
                        let db = grad_slot(&mut grads, self, *bias);
                        for r in 0..n {
                            for c in 0..d {
                                db.data_mut()[c] += g.data()[r * d + c];
                            }
                        }
                    }
                    let dx = grad_slot(&mut grads, self, *src);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let xh = &normalized[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = g.data()[r * d + c] * gv[c];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let sum_xh: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        let row = dx.row_slice_mut(r);
                        for c in 0..d {
                            row[c] += k * (d as f64 * dxhat[c] - sum - xh[c] * sum_xh);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    mask,
                    weights,
                    offsets,
                } => {
                    let (n, d) = self.dims(*q);
                    let s = self.dims(*k).0;
                    let dh = d / heads;
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = vec![0.0; n * d];
                    let mut dk = vec![0.0; s * d];
                    let mut dv = vec![0.0; s * d];
                    let mut da = Vec::new();
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..n {
                            let w = &weights[offsets[h * n + i]..offsets[h * n + i + 1]];
                            if w.is_empty() {
                                continue;
                            }
                            mask.fill_keys(i, s, &mut keys);
                            let go = &g.row_slice(i)[cols.clone()];
                            da.clear();
                            let mut weighted = 0.0;
                            for (&a, &j) in w.iter().zip(&keys) {
                                let vj = &vv.row_slice(j)[cols.clone()];
                                let dot_a = dot(go, vj);
                                da.push(dot_a);
                                weighted += a * dot_a;
                                let dvj = &mut dv[j * d + cols.start..j * d + cols.end];
                                for (x, y) in dvj.iter_mut().zip(go) {
                                    *x += a * y;
                                }
                            }
                            let qi = &qv.row_slice(i)[cols.clone()];
                            for ((&a, &j), &dai) in w.iter().zip(&keys).zip(&da) {
                                let dl = scale * a * (dai - weighted);
                                if dl == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row_slice(j)[cols.clone()];
                                let dqi = &mut dq[i * d + cols.start..i * d + cols.end];
                                for (x, y) in dqi.iter_mut().zip(kj) {
                                    *x += dl * y;
                                }
                                let dkj = &mut dk[j * d + cols.start..j * d + cols.end];
                                for (x, y) in dkj.iter_mut().zip(qi) {
                                    *x += dl * y;
                                }
                            }
                        }
                    }
                    add_into(grad_slot(&mut grads, self, *q), &dq);
                    add_into(grad_slot(&mut grads, self, *k), &dk);
                    add_into(grad_slot(&mut grads, self, *v), &dv);
                }
                Op::Dropout { src, keep } => {
                    let ds = grad_slot(&mut grads, self, *src);
                    for ((x, v), m) in ds.data_mut().iter_mut().zip(g.data()).zip(keep) {
                        *x += v * m;
                    }
                }
                Op::SampledNll {
                    logits,
                    cols,
                    probs,
                } => {
                    let m = cols.len();
                    let c = self.dims(*logits).1;
                    let up = g.data()[0] / m as f64;
                    let dl = grad_slot(&mut grads, self, *logits);
                    let mut p = probs.iter();
                    for (i, cs) in cols.iter().enumerate() {
                        for (pos, &j) in cs.iter().enumerate() {
                            let pj = *p.next().expect("one probability per candidate");
                            let target = if pos == 0 { 1.0 } else { 0.0 };
                            dl.data_mut()[i * c + j] += up * (pj - target);
                        }
                    }
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let da = grad_slot(&mut grads, self, *a);
                    da.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], graph: &Graph, id: NodeId) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(graph.value(id).shape()))
}

fn add_into(t: &mut Tensor, src: &[f64]) {
    for (x, y) in t.data_mut().iter_mut().zip(src) {
        *x += y;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}
