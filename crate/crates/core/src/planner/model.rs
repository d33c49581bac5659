use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Mlp, LN_EPS};
use crate::numerics::{BoolMatrix, Graph, Linear, NodeId, ParamId, ParamStore, Rng, Tensor};
use crate::posenc::{PhaseTable, RopeConfig};
use crate::sequence::{build_mask, Pos3, Position, SegmentKind, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Hidden width `D_p`.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Target-embedding width `D_e`.
    pub embed_dim: usize,
    pub vocab: usize,
    /// Add the per-segment rotary phase on top of the 3D positions.
    pub segment_rope: bool,
    pub rope_base: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 4,
            embed_dim: 16,
            vocab: crate::toydata::vocab::VOCAB_SIZE,
            segment_rope: false,
            rope_base: 10_000.0,
        }
    }
}

impl PlannerConfig {
    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            base: self.rope_base,
            ..RopeConfig::new(self.dim / self.heads)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "planner dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.embed_dim == 0 || self.vocab == 0 {
            return Err(Error::Config("planner embed_dim and vocab must be positive".into()));
        }
        self.rope().validate()
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn: Attention,
    mlp: Mlp,
}

/// Masked-infilling transformer over text, source and target tokens.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub cfg: PlannerConfig,
    text_table: ParamId,
    proj_source: Linear,
    proj_target: Linear,
    /// Shared learnable embedding substituted at masked target positions.
    pub mask_embedding: ParamId,
    blocks: Vec<Block>,
    text_head: Linear,
}

impl PlannerModel {
    pub fn new(cfg: PlannerConfig, store: &mut ParamStore<f64>, rng: &mut Rng, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let (d, e) = (cfg.dim, cfg.embed_dim);
        let n = |s: &str| format!("{prefix}.{s}");
        let text_table = store.add(n("text.table"), rng.normal_tensor(&[cfg.vocab, d]));
        let proj_source = Linear::new(store, rng, &n("proj_source"), e, d, 1.0, true);
        let proj_target = Linear::new(store, rng, &n("proj_target"), e, d, 1.0, true);
        let mask_embedding = store.add(n("mask_embedding"), rng.normal_tensor(&[1, e]));
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                attn: Attention::new(store, rng, &n(&format!("block{i}.attn")), d, d, cfg.heads),
                mlp: Mlp::new(store, rng, &n(&format!("block{i}.mlp")), d, cfg.mlp_ratio * d, d),
            })
            .collect();
        let text_head = Linear::new(store, rng, &n("text_head"), d, cfg.vocab, 1.0, true);
        Ok(Self {
            cfg,
            text_table,
            proj_source,
            proj_target,
            mask_embedding,
            blocks,
            text_head,
        })
    }

    /// Rotary table for every token; text sits at `(l, 0, 0)`.
    pub fn phase_table(&self, seq: &TokenSequence) -> Result<PhaseTable<f64>> {
        let rope = self.cfg.rope();
        let layout = seq.layout();
        let mut tables = Vec::new();
        let toks = seq.tokens();
        let mut start = 0;
        while start < toks.len() {
            let slot = toks[start].segment;
            let end = start + toks[start..].iter().take_while(|t| t.segment == slot).count();
            let positions: Vec<Pos3> = toks[start..end]
                .iter()
                .map(|t| match t.position {
                    Position::Text(l) => Pos3 { t: l, h: 0, w: 0 },
                    Position::Visual(p) => p,
                })
                .collect();
            let seg = if self.cfg.segment_rope {
                layout[slot].segment_index().unwrap_or(0)
            } else {
                0
            };
            tables.push(PhaseTable::for_positions(&rope, &positions, seg)?);
            start = end;
        }
        Ok(PhaseTable::concat(&tables.iter().collect::<Vec<_>>()))
    }

    /// Input rows `[n, D_p]`; masked target rows read the shared mask embedding.
    pub fn embed_inputs(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, seq: &TokenSequence) -> Result<NodeId> {
        let toks = seq.tokens();
        let e = self.cfg.embed_dim;
        let emb = seq.embeddings();
        let has_visual = toks.iter().any(|t| t.kind != SegmentKind::Text);
        if has_visual && (emb.cols() != e || emb.rows() != toks.len()) {
            return Err(Error::dim("planner embeddings", emb.shape(), &[toks.len(), e]));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < toks.len() {
            let kind = toks[start].kind;
            let end = start + toks[start..].iter().take_while(|t| t.kind == kind).count();
            let rows = start..end;
            let part = match kind {
                SegmentKind::Text => {
                    let ids: Vec<usize> = toks[rows].iter().map(|t| t.token_id).collect();
                    if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab) {
                        return Err(Error::Index {
                            index: bad,
                            len: self.cfg.vocab,
                        });
                    }
                    let table = g.param(store, self.text_table);
                    g.embedding(table, &ids)?
                }
                SegmentKind::VisualSource => {
                    let x = g.constant(slice_rows(emb, rows));
                    self.proj_source.forward(g, store, x)?
                }
                SegmentKind::VisualTarget => {
                    let masked: Vec<bool> = toks[rows.clone()].iter().map(|t| t.masked).collect();
                    let mut base = slice_rows(emb, rows);
                    for (r, &m) in masked.iter().enumerate() {
                        if m {
                            base.row_mut(r).fill(0.0);
                        }
                    }
                    let mut x = g.constant(base);
                    if masked.iter().any(|&m| m) {
                        let ind = Tensor::new(
                            vec![masked.len(), 1],
                            masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                        )?;
                        let ind = g.constant(ind);
                        let me = g.param(store, self.mask_embedding);
                        let fill = g.matmul(ind, me)?;
                        x = g.add(x, fill)?;
                    }
                    self.proj_target.forward(g, store, x)?
                }
            };
            parts.push(part);
            start = end;
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    /// Transformer stack on prepared inputs; returns normalized hidden states.
    pub(crate) fn encode(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        x: NodeId,
        table: &PhaseTable<f64>,
        mask: &BoolMatrix,
    ) -> Result<NodeId> {
        let mut x = x;
        for b in &self.blocks {
            let h = g.layer_norm(x, LN_EPS);
            let a = b.attn.forward(g, store, h, h, Some(table), Some(table), Some(mask))?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, LN_EPS);
            let m = b.mlp.forward(g, store, h)?;
            x = g.add(x, m)?;
        }
        Ok(g.layer_norm(x, LN_EPS))
    }

    /// Hidden states `z: [n, D_p]`, one per token.
    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, seq: &TokenSequence) -> Result<NodeId> {
        if seq.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let x = self.embed_inputs(g, store, seq)?;
        let table = self.phase_table(seq)?;
        let mask = build_mask(seq);
        self.encode(g, store, x, &table, &mask.allow)
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn text_logits(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, z: NodeId) -> Result<NodeId> {
        self.text_head.forward(g, store, z)
    }

    /// Hidden states on plain tensors.
    pub fn hidden(&self, store: &ParamStore<f64>, seq: &TokenSequence) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let z = self.forward(&mut g, store, seq)?;
        Ok(g.value(z).clone())
    }
}

fn slice_rows(t: &Tensor<f64>, rows: std::ops::Range<usize>) -> Tensor<f64> {
    let cols = t.cols();
    Tensor::new(vec![rows.len(), cols], t.data()[rows.start * cols..rows.end * cols].to_vec()).expect("in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{serialize, Grid3};

    fn setup(rng: &mut Rng) -> (PlannerModel, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = PlannerConfig {
            dim: 16,
            embed_dim: 8,
            ..PlannerConfig::default()
        };
        let m = PlannerModel::new(cfg, &mut store, rng, "planner").unwrap();
        (m, store)
    }

    fn seq(rng: &mut Rng) -> TokenSequence {
        let s = serialize(3, &[Grid3::new(1, 2, 2)], Grid3::new(1, 2, 2)).unwrap();
        let n = s.len();
        s.with_text_ids(&[1, 5, 9]).unwrap().with_embeddings(rng.normal_tensor(&[n, 8])).unwrap()
    }

    #[test]
    fn invisible_tokens_do_not_influence_outputs() {
        let mut rng = Rng::new(1);
        let (m, store) = setup(&mut rng);
        let s = seq(&mut rng);
        let z0 = m.hidden(&store, &s).unwrap();
        // Target tokens are invisible to text and source queries.
        let mut s2 = s.clone();
        let last = s2.len() - 1;
        s2.set_embedding(last, &[9.0; 8]).unwrap();
        let z1 = m.hidden(&store, &s2).unwrap();
        for r in 0..7 {
            for c in 0..16 {
                assert!((z0.at(r, c) - z1.at(r, c)).abs() < 1e-10);
            }
        }
        assert!((z0.at(last, 0) - z1.at(last, 0)).abs() > 1e-6);
    }

    #[test]
    fn swapping_tokens_and_phases_permutes_outputs() {
        let mut rng = Rng::new(2);
        let (m, store) = setup(&mut rng);
        let rope = m.cfg.rope();
        let pos = [Pos3 { t: 0, h: 0, w: 0 }, Pos3 { t: 1, h: 1, w: 0 }];
        let x: Tensor<f64> = rng.normal_tensor(&[2, 16]);
        let swapped = Tensor::from_rows(&[x.row(1).to_vec(), x.row(0).to_vec()]).unwrap();
        let mask = BoolMatrix::from_fn(2, 2, |_, _| true);
        let run = |x: &Tensor<f64>, p: [Pos3; 2]| {
            let table = PhaseTable::for_positions(&rope, &p, 0).unwrap();
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let z = m.encode(&mut g, &store, xn, &table, &mask).unwrap();
            g.value(z).clone()
        };
        let a = run(&x, pos);
        let b = run(&swapped, [pos[1], pos[0]]);
        for c in 0..16 {
            assert!((a.at(0, c) - b.at(1, c)).abs() < 1e-10);
            assert!((a.at(1, c) - b.at(0, c)).abs() < 1e-10);
        }
    }

    #[test]
    fn mask_embedding_unused_without_masked_tokens() {
        let mut rng = Rng::new(3);
        let (m, mut store) = setup(&mut rng);
        let s = seq(&mut rng);
        let z0 = m.hidden(&store, &s).unwrap();
        store.get_mut(m.mask_embedding).data_mut().fill(123.0);
        assert_eq!(m.hidden(&store, &s).unwrap(), z0);
        let mut masked = s.clone();
        let last = masked.len() - 1;
        masked.set_masked(last, true).unwrap();
        assert_ne!(m.hidden(&store, &masked).unwrap(), z0);
    }

    #[test]
    fn single_text_token_matches_oracle() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let cfg = PlannerConfig {
            dim: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 4,
            ..PlannerConfig::default()
        };
        let m = PlannerModel::new(cfg, &mut store, &mut rng, "p").unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let n = rng.normal_tensor::<f64>(&shape).scale(0.3);
            store.get_mut(id).axpy(1.0, &n).unwrap();
        }
        let s = TokenSequence::text_only(1).unwrap().with_text_ids(&[7]).unwrap();
        let got = m.hidden(&store, &s).unwrap();

        let get = |name: &str| store.get(store.id(name).unwrap()).clone();
        let lin = |x: &[f64], name: &str| -> Vec<f64> {
            let w = get(&format!("{name}.w"));
            let mut y = vec![0.0; w.cols()];
            for (i, xi) in x.iter().enumerate() {
                for (j, yj) in y.iter_mut().enumerate() {
                    *yj += xi * w.at(i, j);
                }
            }
            if let Some(b) = store.id(&format!("{name}.b")) {
                y.iter_mut().zip(store.get(b).data()).for_each(|(a, b)| *a += b);
            }
            y
        };
        let ln = |x: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n;
            x.iter().map(|a| (a - mu) / (var + LN_EPS).sqrt()).collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let mut h = get("p.text.table").row(7).to_vec();
        // One token attends only to itself with weight one.
        let a = lin(&lin(&ln(&h), "p.block0.attn.v"), "p.block0.attn.o");
        h.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        let hid: Vec<f64> = lin(&ln(&h), "p.block0.mlp.fc1").into_iter().map(gelu).collect();
        let f = lin(&hid, "p.block0.mlp.fc2");
        h.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
        let want = ln(&h);
        for (a, b) in got.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
