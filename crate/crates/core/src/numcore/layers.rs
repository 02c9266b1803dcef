//! Parameterised building blocks: attention with the residual folded into
//! the operator, the position-wise feed-forward network and layer norm.

use rand::Rng;

use super::graph::{Graph, Mask, NodeId};
use super::params::{xavier, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Multi-head attention computing
/// `x_q + concat_h(softmax(x_q Wq_h · (x_kv Wk_h)ᵀ) x_kv Wv_h) · Wz`.
///
/// Self-attention passes the same stream as query and memory. Logits are
/// scaled by `1/sqrt(d_head)` only when `scaled` is set.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wz: ParamId,
    pub heads: usize,
    pub scaled: bool,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        scaled: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            wq: store.add(format!("{prefix}.wq"), xavier(dim, dim, rng))?,
            wk: store.add(format!("{prefix}.wk"), xavier(dim, dim, rng))?,
            wv: store.add(format!("{prefix}.wv"), xavier(dim, dim, rng))?,
            wz: store.add(format!("{prefix}.wz"), xavier(dim, dim, rng))?,
            heads,
            scaled,
        })
    }

    fn scale(&self, store: &ParamStore) -> f64 {
        if self.scaled {
            let d = store.value(self.wq).cols();
            1.0 / ((d / self.heads) as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn forward_self(&self, g: &mut Graph, x: NodeId, mask: Mask) -> Result<NodeId> {
        self.forward(g, x, x, mask)
    }

    /// Encoder-decoder attention: queries from `query`, keys and values from
    /// `memory`, residual on the query stream.
    pub fn forward(&self, g: &mut Graph, query: NodeId, memory: NodeId, mask: Mask) -> Result<NodeId> {
        let scale = self.scale(g.store());
        let (wq, wk, wv, wz) = (
            g.param(self.wq),
            g.param(self.wk),
            g.param(self.wv),
            g.param(self.wz),
        );
        let q = g.matmul(query, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let heads = g.attention(q, k, v, self.heads, scale, mask)?;
        let projected = g.matmul(heads, wz)?;
        g.add(projected, query)
    }
}

/// `max(0, x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            w1: store.add(format!("{prefix}.w1"), xavier(dim, hidden, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden]))?,
            w2: store.add(format!("{prefix}.w2"), xavier(hidden, dim, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (w1, b1, w2, b2) = (
            g.param(self.w1),
            g.param(self.b1),
            g.param(self.w2),
            g.param(self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[1, dim], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}
