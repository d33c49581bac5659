use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{modulate, time_features, Attention, Mlp, LN_EPS};
use crate::numerics::{BoolMatrix, Graph, Linear, NodeId, ParamId, ParamStore, Rng, Tensor};
use crate::posenc::{build_phase_table, PhaseTable, PosEncoding, RopeConfig};
use crate::sequence::Grid3;
use crate::toydata::CHANNELS;

use super::vae::patch_dim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_freqs: usize,
    pub vocab: usize,
    pub max_text: usize,
    /// Width of the planner hidden states fed through the projector.
    pub planner_dim: usize,
    /// Largest source segment index.
    pub max_segments: usize,
    pub pos_encoding: PosEncoding,
    pub rope_base: f64,
    pub segment_base: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 4,
            time_freqs: 16,
            vocab: crate::toydata::vocab::VOCAB_SIZE,
            max_text: 32,
            planner_dim: 32,
            max_segments: 2,
            pos_encoding: PosEncoding::SegmentRope3d,
            rope_base: 10_000.0,
            segment_base: 10_000.0,
        }
    }
}

impl RendererConfig {
    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            base: self.rope_base,
            segment_base: self.segment_base,
            ..RopeConfig::new(self.dim / self.heads)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "renderer dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        self.rope().validate()
    }
}

/// A clean source segment (video or reference frame) in patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSegment {
    pub segment_index: usize,
    /// Token grid.
    pub grid: Grid3,
    pub tokens: Tensor<f64>,
}

/// Cross-attention conditions; `None` drops the condition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub text: Option<Vec<usize>>,
    /// Planner hidden states `[n, planner_dim]`.
    pub plan: Option<Tensor<f64>>,
}

/// [`Conditioning`] with planner states already in the graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct CondNodes<'a> {
    pub text: Option<&'a [usize]>,
    pub plan: Option<NodeId>,
}

impl Conditioning {
    pub fn nodes(&self, g: &mut Graph<f64>) -> CondNodes<'_> {
        CondNodes {
            text: self.text.as_deref(),
            plan: self.plan.as_ref().filter(|p| p.rows() > 0).map(|p| g.constant(p.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Hide every source column from target queries.
    pub mask_sources: bool,
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    attn: Attention,
    cross: Attention,
    mlp: Mlp,
}

/// Toy diffusion transformer over patch tokens.
#[derive(Debug, Clone)]
pub struct RendererModel {
    pub cfg: RendererConfig,
    embed_target: Linear,
    embed_source: Linear,
    time_in: Linear,
    time_out: Linear,
    text_table: ParamId,
    text_pos: ParamId,
    null_token: ParamId,
    /// Zero-initialized map from planner states into the condition stream.
    pub projector: Linear,
    segment_table: Option<ParamId>,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
}

impl RendererModel {
    pub fn new(cfg: RendererConfig, store: &mut ParamStore<f64>, rng: &mut Rng, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let pd = patch_dim(CHANNELS);
        let n = |s: &str| format!("{prefix}.{s}");
        let embed_target = Linear::new(store, rng, &n("embed_target"), pd, d, 1.0, true);
        let embed_source = Linear::new(store, rng, &n("embed_source"), pd, d, 1.0, true);
        let time_in = Linear::new(store, rng, &n("time_in"), 2 * cfg.time_freqs, d, 1.0, true);
        let time_out = Linear::new(store, rng, &n("time_out"), d, d, 1.0, true);
        let text_table = store.add(n("text.table"), rng.normal_tensor(&[cfg.vocab, d]));
        let text_pos = store.add(n("text.pos"), rng.normal_tensor::<f64>(&[cfg.max_text, d]).scale(0.1));
        let null_token = store.add(n("null_token"), rng.normal_tensor(&[1, d]));
        let projector = Linear::zeros(store, &n("projector"), cfg.planner_dim, d);
        let segment_table = (cfg.pos_encoding == PosEncoding::SegmentEmbedding).then(|| {
            store.add(
                n("segment_table"),
                rng.normal_tensor::<f64>(&[cfg.max_segments + 1, d]).scale(0.1),
            )
        });
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                modulation: Linear::zeros(store, &n(&format!("block{i}.mod")), d, 4 * d),
                attn: Attention::new(store, rng, &n(&format!("block{i}.attn")), d, d, cfg.heads),
                cross: Attention::new(store, rng, &n(&format!("block{i}.cross")), d, d, cfg.heads),
                mlp: Mlp::new(store, rng, &n(&format!("block{i}.mlp")), d, cfg.mlp_ratio * d, d),
            })
            .collect();
        let final_mod = Linear::zeros(store, &n("final_mod"), d, 2 * d);
        let head = Linear::zeros(store, &n("head"), d, pd);
        Ok(Self {
            cfg,
            embed_target,
            embed_source,
            time_in,
            time_out,
            text_table,
            text_pos,
            null_token,
            projector,
            segment_table,
            blocks,
            final_mod,
            head,
        })
    }

    fn check_layout(&self, sources: &[SourceSegment], pd: usize) -> Result<()> {
        let mut seen = vec![false; self.cfg.max_segments + 1];
        for s in sources {
            let i = s.segment_index;
            if i == 0 || i > self.cfg.max_segments {
                return Err(Error::Layout(format!(
                    "source segment index {i} outside 1..={}",
                    self.cfg.max_segments
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Layout(format!("segment index {i} used twice")));
            }
            if s.tokens.rows() != s.grid.count() || s.tokens.cols() != pd {
                return Err(Error::dim("source tokens", s.tokens.shape(), &[s.grid.count(), pd]));
            }
        }
        Ok(())
    }

    fn phase_table(&self, grid: Grid3, segment: usize) -> Result<PhaseTable<f64>> {
        let t = build_phase_table(&self.cfg.rope(), grid, segment)?;
        Ok(if self.cfg.pos_encoding.uses_segment_phase() {
            t
        } else {
            t.without_segment()
        })
    }

    /// Condition tokens: null token, then text features, then projected plan.
    pub fn cond_tokens(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, cond: CondNodes<'_>) -> Result<NodeId> {
        let mut parts = vec![g.param(store, self.null_token)];
        if let Some(text) = cond.text.filter(|t| !t.is_empty()) {
            if text.len() > self.cfg.max_text {
                return Err(Error::dim("text length", &[text.len()], &[self.cfg.max_text]));
            }
            let table = g.param(store, self.text_table);
            let emb = g.embedding(table, text)?;
            let pos = g.param(store, self.text_pos);
            let pos = g.slice_rows(pos, 0, text.len())?;
            parts.push(g.add(emb, pos)?);
        }
        if let Some(p) = cond.plan {
            parts.push(self.projector.forward(g, store, p)?);
        }
        g.concat_rows(&parts)
    }

    /// Predicted velocity `[target tokens, patch_dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        x_t: NodeId,
        grid: Grid3,
        t: f64,
        cond: CondNodes<'_>,
        sources: &[SourceSegment],
        opts: ForwardOptions,
    ) -> Result<NodeId> {
        let pd = patch_dim(CHANNELS);
        let xv = g.value(x_t);
        if xv.rows() != grid.count() || xv.cols() != pd {
            return Err(Error::dim("renderer input", xv.shape(), &[grid.count(), pd]));
        }
        self.check_layout(sources, pd)?;
        let n_target = grid.count();

        let mut tables = vec![self.phase_table(grid, 0)?];
        let mut parts = vec![self.embed_target.forward(g, store, x_t)?];
        let mut seg_ids = vec![0usize; n_target];
        for s in sources {
            tables.push(self.phase_table(s.grid, s.segment_index)?);
            let tok = g.constant(s.tokens.clone());
            parts.push(self.embed_source.forward(g, store, tok)?);
            seg_ids.extend(std::iter::repeat_n(s.segment_index, s.grid.count()));
        }
        let table = PhaseTable::concat(&tables.iter().collect::<Vec<_>>());
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let n = seg_ids.len();
        let mask = opts
            .mask_sources
            .then(|| BoolMatrix::from_fn(n, n, |q, k| q >= n_target || k < n_target));

        let tf = g.constant(time_features(t, self.cfg.time_freqs));
        let temb = self.time_in.forward(g, store, tf)?;
        let temb = g.gelu(temb);
        let temb = self.time_out.forward(g, store, temb)?;
        let temb = g.gelu(temb);
        let c = self.cond_tokens(g, store, cond)?;
        let d = self.cfg.dim;

        for b in &self.blocks {
            if let Some(st) = self.segment_table {
                let st = g.param(store, st);
                let e = g.embedding(st, &seg_ids)?;
                x = g.add(x, e)?;
            }
            let m = b.modulation.forward(g, store, temb)?;
            let sh_a = g.slice_cols(m, 0, d)?;
            let sc_a = g.slice_cols(m, d, d)?;
            let sh_m = g.slice_cols(m, 2 * d, d)?;
            let sc_m = g.slice_cols(m, 3 * d, d)?;

            let h = g.layer_norm(x, LN_EPS);
            let h = modulate(g, h, sh_a, sc_a)?;
            let a = b.attn.forward(g, store, h, h, Some(&table), Some(&table), mask.as_ref())?;
            x = g.add(x, a)?;

            let h = g.layer_norm(x, LN_EPS);
            let a = b.cross.forward(g, store, h, c, None, None, None)?;
            x = g.add(x, a)?;

            let h = g.layer_norm(x, LN_EPS);
            let h = modulate(g, h, sh_m, sc_m)?;
            let a = b.mlp.forward(g, store, h)?;
            x = g.add(x, a)?;
        }

        let xt = if n == n_target { x } else { g.slice_rows(x, 0, n_target)? };
        let m = self.final_mod.forward(g, store, temb)?;
        let sh = g.slice_cols(m, 0, d)?;
        let sc = g.slice_cols(m, d, d)?;
        let h = g.layer_norm(xt, LN_EPS);
        let h = modulate(g, h, sh, sc)?;
        self.head.forward(g, store, h)
    }

    /// Forward on plain tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        store: &ParamStore<f64>,
        x_t: &Tensor<f64>,
        grid: Grid3,
        t: f64,
        cond: &Conditioning,
        sources: &[SourceSegment],
        opts: ForwardOptions,
    ) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let cond = cond.nodes(&mut g);
        let out = self.forward(&mut g, store, x, grid, t, cond, sources, opts)?;
        Ok(g.value(out).clone())
    }
}
