//! Transformer building blocks shared by the planner and the renderer.

use crate::error::Result;
use crate::numerics::{BoolMatrix, Graph, Linear, NodeId, ParamStore, Rng, Tensor};
use crate::posenc::PhaseTable;

pub const LN_EPS: f64 = 1e-6;

/// Multi-head attention with optional rotary phases on queries and keys.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore<f64>, rng: &mut Rng, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, 1.0, false),
            k: Linear::new(store, rng, &format!("{name}.k"), kv_dim, dim, 1.0, false),
            v: Linear::new(store, rng, &format!("{name}.v"), kv_dim, dim, 1.0, false),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, 0.5, true),
            heads,
            head_dim: dim / heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        xq: NodeId,
        xkv: NodeId,
        rope_q: Option<&PhaseTable<f64>>,
        rope_k: Option<&PhaseTable<f64>>,
        mask: Option<&BoolMatrix>,
    ) -> Result<NodeId> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let mut qh = g.slice_cols(q, off, self.head_dim)?;
            let mut kh = g.slice_cols(k, off, self.head_dim)?;
            let vh = g.slice_cols(v, off, self.head_dim)?;
            if let Some(t) = rope_q {
                qh = g.rotate_pairs(qh, t.cos(), t.sin())?;
            }
            if let Some(t) = rope_k {
                kh = g.rotate_pairs(kh, t.cos(), t.sin())?;
            }
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax(s, mask)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, store, cat)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore<f64>, rng: &mut Rng, name: &str, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, 1.0, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out, 0.5, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// `x * (1 + scale) + shift` with row-broadcast `[1, D]` modulation.
pub fn modulate(g: &mut Graph<f64>, x: NodeId, shift: NodeId, scale: NodeId) -> Result<NodeId> {
    let xs = g.mul(x, scale)?;
    let x = g.add(x, xs)?;
    g.add(x, shift)
}

/// Sinusoidal features `[1, 2n]` of a scalar time in `[0, 1]`.
pub fn time_features(t: f64, n: usize) -> Tensor<f64> {
    let mut v = Vec::with_capacity(2 * n);
    for i in 0..n {
        let freq = (-(1000.0f64).ln() * i as f64 / n as f64).exp();
        v.push((t * 1000.0 * freq).cos());
    }
    for i in 0..n {
        let freq = (-(1000.0f64).ln() * i as f64 / n as f64).exp();
        v.push((t * 1000.0 * freq).sin());
    }
    Tensor::new(vec![1, 2 * n], v).expect("sized")
}

/// Per-row time features `[rows, 2n]`.
pub fn time_features_rows(ts: &[f64], n: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(ts.len() * 2 * n);
    for &t in ts {
        data.extend_from_slice(time_features(t, n).data());
    }
    Tensor::new(vec![ts.len(), 2 * n], data).expect("sized")
}
