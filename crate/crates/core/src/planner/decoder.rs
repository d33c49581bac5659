use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{CondSet, GuidanceSpec, NoPostCompose};
use crate::nn::{time_features_rows, Mlp, LN_EPS};
use crate::numerics::{Graph, Linear, NodeId, ParamStore, Rng, Tensor};
use crate::renderer::integrate_with;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub time_freqs: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 48,
            blocks: 3,
            time_freqs: 8,
        }
    }
}

/// Per-position flow head mapping noise to target embeddings, conditioned on
/// planner hidden states. Each residual block reads `[LN(h), temb, z]`.
#[derive(Debug, Clone)]
pub struct EmbeddingDecoder {
    pub cfg: DecoderConfig,
    pub embed_dim: usize,
    pub cond_dim: usize,
    in1: Linear,
    in2: Linear,
    time: Linear,
    blocks: Vec<Mlp>,
    out: Linear,
}

impl EmbeddingDecoder {
    pub fn new(
        cfg: DecoderConfig,
        embed_dim: usize,
        cond_dim: usize,
        store: &mut ParamStore<f64>,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.time_freqs == 0 {
            return Err(Error::Config("decoder dim and time_freqs must be positive".into()));
        }
        let d = cfg.dim;
        let n = |s: &str| format!("{prefix}.{s}");
        let in1 = Linear::new(store, rng, &n("in1"), embed_dim, d, 1.0, true);
        let in2 = Linear::new(store, rng, &n("in2"), d, d, 1.0, true);
        let time = Linear::new(store, rng, &n("time"), 2 * cfg.time_freqs, d, 1.0, true);
        let blocks = (0..cfg.blocks)
            .map(|i| Mlp::new(store, rng, &n(&format!("block{i}")), 2 * d + cond_dim, d, d))
            .collect();
        let out = Linear::new(store, rng, &n("out"), d, embed_dim, 0.5, true);
        Ok(Self {
            cfg,
            embed_dim,
            cond_dim,
            in1,
            in2,
            time,
            blocks,
            out,
        })
    }

    /// Velocity `[m, D_e]` for rows `x_t` at per-row times `ts` given `z: [m, D_p]`.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        x_t: NodeId,
        ts: &[f64],
        z: NodeId,
    ) -> Result<NodeId> {
        let m = g.value(x_t).rows();
        if ts.len() != m || g.value(z).rows() != m {
            return Err(Error::dim("decoder rows", &[m], &[ts.len(), g.value(z).rows()]));
        }
        let h = self.in1.forward(g, store, x_t)?;
        let h = g.gelu(h);
        let mut h = self.in2.forward(g, store, h)?;
        let tf = g.constant(time_features_rows(ts, self.cfg.time_freqs));
        let temb = self.time.forward(g, store, tf)?;
        let temb = g.gelu(temb);
        let cond = g.concat_cols(&[temb, z])?;
        for b in &self.blocks {
            let n = g.layer_norm(h, LN_EPS);
            let inp = g.concat_cols(&[n, cond])?;
            let r = b.forward(g, store, inp)?;
            h = g.add(h, r)?;
        }
        let n = g.layer_norm(h, LN_EPS);
        self.out.forward(g, store, n)
    }

    pub fn predict(&self, store: &ParamStore<f64>, x_t: &Tensor<f64>, t: f64, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let zn = g.constant(z.clone());
        let ts = vec![t; x_t.rows()];
        let v = self.forward(&mut g, store, x, &ts, zn)?;
        Ok(g.value(v).clone())
    }

    /// Flow-matching loss at uniform times against clean targets `[m, D_e]`.
    pub fn flow_loss(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        z: NodeId,
        targets: &Tensor<f64>,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let m = targets.rows();
        let ts: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let noise: Tensor<f64> = rng.normal_tensor(targets.shape());
        let mut x_t = targets.clone();
        let mut v = targets.clone();
        for (r, &t) in ts.iter().enumerate() {
            let e = noise.row(r);
            for ((x, vv), &n) in x_t.row_mut(r).iter_mut().zip(v.row_mut(r)).zip(e) {
                let data = *x;
                *x = t * data + (1.0 - t) * n;
                *vv = data - n;
            }
        }
        let x = g.constant(x_t);
        let pred = self.forward(g, store, x, &ts, z)?;
        g.mse(pred, &v)
    }
}

/// Two-branch guidance over planner passes: `img` covers sources, `txt` the text.
pub fn decoder_guidance(has_source: bool, has_text: bool, g_text: f64, g_image: f64) -> Result<GuidanceSpec> {
    GuidanceSpec::new([false, has_source, has_text, false], [1.0, g_image, g_text, 1.0])
}

/// Euler-integrates the decoder from noise for every row of the hidden states,
/// one planner pass per guidance subset.
pub fn decode_embedding(
    decoder: &EmbeddingDecoder,
    store: &ParamStore<f64>,
    z: &BTreeMap<CondSet, Tensor<f64>>,
    spec: &GuidanceSpec,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor<f64>> {
    decode_with(decoder, store, z, spec, steps, rng, true)
}

fn decode_with(
    decoder: &EmbeddingDecoder,
    store: &ParamStore<f64>,
    z: &BTreeMap<CondSet, Tensor<f64>>,
    spec: &GuidanceSpec,
    steps: usize,
    rng: &mut Rng,
    unit_shortcut: bool,
) -> Result<Tensor<f64>> {
    let full = z
        .get(&spec.full_set())
        .ok_or_else(|| Error::Composition(format!("missing hidden states for {}", spec.full_set())))?;
    let noise = rng.normal_tensor(&[full.rows(), decoder.embed_dim]);
    let field = |x: &Tensor<f64>, t: f64, s: CondSet| {
        let zs = z
            .get(&s)
            .ok_or_else(|| Error::Composition(format!("missing hidden states for {s}")))?;
        decoder.predict(store, x, t, zs)
    };
    integrate_with(&field, noise, steps, spec, 1.0, &NoPostCompose, unit_shortcut)
}
