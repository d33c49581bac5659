//! Masked-generative planner: infills target embeddings over iterative
//! reveal steps and exposes its hidden states to the renderer.

mod decoder;
mod model;
mod vit;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use decoder::{decode_embedding, decoder_guidance, DecoderConfig, EmbeddingDecoder};
pub use model::{PlannerConfig, PlannerModel};
pub use vit::ToyVit;

use crate::error::{Error, Result};
use crate::guidance::{CondSet, Condition};
use crate::numerics::{Gradients, Graph, NodeId, ParamStore, Rng, Tensor};
use crate::schedules::{inference_mask_ratio, sample_mask_ratio, MaskRatioConfig, TaskKind};
use crate::sequence::{apply_target_mask, mask_count, SegmentDesc, SegmentKind, TokenSequence};

/// Stage weights on the two planner objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub visual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { text: 0.2, visual: 1.0 }
    }
}

/// Copy of `seq` without its text and/or source segments. Target rows keep
/// their embeddings and mask flags.
pub fn restrict(seq: &TokenSequence, keep_text: bool, keep_sources: bool) -> Result<TokenSequence> {
    let keep = |d: &SegmentDesc| match d {
        SegmentDesc::Text { .. } => keep_text,
        SegmentDesc::Source { .. } => keep_sources,
        SegmentDesc::Target { .. } => true,
    };
    let layout: Vec<SegmentDesc> = seq.layout().iter().copied().filter(keep).collect();
    if layout.is_empty() {
        return Err(Error::Contract("restriction leaves no tokens".into()));
    }
    let rows: Vec<usize> = (0..seq.len())
        .filter(|&i| keep(&seq.layout()[seq.tokens()[i].segment]))
        .collect();
    let emb = seq.embeddings();
    let mut data = Vec::with_capacity(rows.len() * emb.cols());
    for &r in &rows {
        data.extend_from_slice(emb.row(r));
    }
    let mut out = TokenSequence::from_layout(layout)?.with_embeddings(Tensor::new(vec![rows.len(), emb.cols()], data)?)?;
    let ids: Vec<usize> = rows
        .iter()
        .filter(|&&r| seq.tokens()[r].kind == SegmentKind::Text)
        .map(|&r| seq.tokens()[r].token_id)
        .collect();
    out = out.with_text_ids(&ids)?;
    for (new, &old) in rows.iter().enumerate() {
        if seq.tokens()[old].masked {
            out.set_masked(new, true)?;
        }
    }
    Ok(out)
}

fn has_kind(seq: &TokenSequence, kind: SegmentKind) -> bool {
    seq.tokens().iter().any(|t| t.kind == kind)
}

/// Graph nodes of the planner objectives for one masked sequence.
#[derive(Debug, Clone)]
pub struct PlannerTerms {
    /// Hidden states of every token.
    pub z: NodeId,
    pub ntp: Option<NodeId>,
    pub visual: Option<NodeId>,
    /// Set when the sampled ratio rounded to zero masked targets.
    pub visual_skipped: bool,
}

/// Builds the next-token and masked-embedding objectives. `masked` must carry
/// ground-truth embeddings in `truth` for every masked target row.
pub fn planner_terms(
    planner: &PlannerModel,
    decoder: &EmbeddingDecoder,
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    masked: &TokenSequence,
    truth: &Tensor<f64>,
    rng: &mut Rng,
) -> Result<PlannerTerms> {
    let z = planner.forward(g, store, masked)?;
    let text: Vec<usize> = masked.indices_of(SegmentKind::Text).collect();
    let ntp = if text.len() >= 2 {
        let rows = g.gather_rows(z, &text[..text.len() - 1])?;
        let logits = planner.text_logits(g, store, rows)?;
        let next: Vec<usize> = text[1..].iter().map(|&i| masked.tokens()[i].token_id).collect();
        Some(g.cross_entropy(logits, &next)?)
    } else {
        None
    };
    let idx = masked.masked_indices();
    let has_target = has_kind(masked, SegmentKind::VisualTarget);
    let visual = if idx.is_empty() {
        None
    } else {
        let zr = g.gather_rows(z, &idx)?;
        let mut gt = Vec::with_capacity(idx.len() * truth.cols());
        for &i in &idx {
            gt.extend_from_slice(truth.row(i));
        }
        let gt = Tensor::new(vec![idx.len(), truth.cols()], gt)?;
        Some(decoder.flow_loss(g, store, zr, &gt, rng)?)
    };
    Ok(PlannerTerms {
        z,
        ntp,
        visual,
        visual_skipped: has_target && idx.is_empty(),
    })
}

/// `w_text * ntp + w_visual * visual` over whichever terms exist.
pub fn weighted_total(g: &mut Graph<f64>, terms: &PlannerTerms, w: LossWeights) -> Result<Option<NodeId>> {
    let mut parts = Vec::new();
    if let Some(n) = terms.ntp {
        parts.push(g.scale(n, w.text));
    }
    if let Some(v) = terms.visual {
        parts.push(g.scale(v, w.visual));
    }
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for p in it {
        acc = g.add(acc, p)?;
    }
    Ok(Some(acc))
}

/// Batch-mean planner losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerLosses {
    pub ntp: Option<f64>,
    pub visual: Option<f64>,
    pub total: f64,
    /// Samples whose visual loss was skipped for lack of masked tokens.
    pub visual_skipped: usize,
}

/// Masks each sequence's targets with a ratio drawn for `task` (text-only
/// sequences are left as is) and returns mean losses with their gradients.
#[allow(clippy::too_many_arguments)]
pub fn train_step_planner(
    planner: &PlannerModel,
    decoder: &EmbeddingDecoder,
    store: &ParamStore<f64>,
    batch: &[TokenSequence],
    task: Option<TaskKind>,
    ratios: &MaskRatioConfig,
    weights: LossWeights,
    rng: &mut Rng,
) -> Result<(PlannerLosses, Gradients<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty planner batch".into()));
    }
    let mut grads = Gradients::zeros_like(store);
    let mut out = PlannerLosses::default();
    let (mut ntp, mut n_ntp, mut vis, mut n_vis) = (0.0, 0, 0.0, 0);
    let w = 1.0 / batch.len() as f64;
    for seq in batch {
        let masked = match task {
            Some(t) if has_kind(seq, SegmentKind::VisualTarget) => {
                let ratio = sample_mask_ratio(ratios, t, rng);
                apply_target_mask(seq, ratio, &vec![0.0; seq.embeddings().cols()], rng)?
            }
            _ => seq.clone(),
        };
        let mut g = Graph::new();
        let terms = planner_terms(planner, decoder, &mut g, store, &masked, seq.embeddings(), rng)?;
        out.visual_skipped += usize::from(terms.visual_skipped);
        if let Some(n) = terms.ntp {
            ntp += g.value(n).item();
            n_ntp += 1;
        }
        if let Some(v) = terms.visual {
            vis += g.value(v).item();
            n_vis += 1;
        }
        if let Some(total) = weighted_total(&mut g, &terms, weights)? {
            out.total += g.value(total).item() * w;
            grads.accumulate(&g.backward(total)?, w);
        }
    }
    out.ntp = (n_ntp > 0).then(|| ntp / n_ntp as f64);
    out.visual = (n_vis > 0).then(|| vis / n_vis as f64);
    Ok((out, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevealOrder {
    /// Most self-consistent predictions first.
    Confidence,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    pub steps: usize,
    pub decoder_steps: usize,
    pub g_text: f64,
    pub g_image: f64,
    pub reveal: RevealOrder,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            steps: 25,
            decoder_steps: 5,
            g_text: 1.2,
            g_image: 1.0,
            reveal: RevealOrder::Confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub masked_after: usize,
    /// Target-local indices revealed at this step.
    pub revealed: Vec<usize>,
    pub mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Completed target embeddings `[M, D_e]`.
    pub embeddings: Tensor<f64>,
    /// Hidden states of the completed sequence `[n, D_p]`.
    pub hidden: Tensor<f64>,
    pub sequence: TokenSequence,
    pub steps: Vec<PlanStep>,
}

impl PlanResult {
    pub fn masked_trace(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.masked_after).collect()
    }
}

fn subset_view(seq: &TokenSequence, s: CondSet) -> Result<TokenSequence> {
    restrict(seq, s.contains(Condition::Txt), s.contains(Condition::Img))
}

/// Round-trip self-consistency of predicted embeddings: re-noise halfway,
/// step back with the conditional decoder, and measure the miss.
fn inconsistency(
    decoder: &EmbeddingDecoder,
    store: &ParamStore<f64>,
    pred: &Tensor<f64>,
    z: &Tensor<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let noise: Tensor<f64> = rng.normal_tensor(pred.shape());
    let mid = pred.zip_map(&noise, |x, e| 0.5 * x + 0.5 * e)?;
    let v = decoder.predict(store, &mid, 0.5, z)?;
    let back = mid.zip_map(&v, |m, v| m + 0.5 * v)?;
    Ok((0..pred.rows())
        .map(|r| {
            back.row(r)
                .iter()
                .zip(pred.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Iterative masked infilling of every target token over `opts.steps` steps.
pub fn plan(
    planner: &PlannerModel,
    decoder: &EmbeddingDecoder,
    store: &ParamStore<f64>,
    seq: &TokenSequence,
    opts: &PlanOptions,
    rng: &mut Rng,
) -> Result<PlanResult> {
    if opts.steps == 0 {
        return Err(Error::Contract("planning needs at least one step".into()));
    }
    let targets = seq.target_indices();
    if targets.is_empty() || targets.iter().any(|&i| !seq.tokens()[i].masked) {
        return Err(Error::Contract("plan expects every target token masked".into()));
    }
    let m = targets.len();
    let spec = decoder_guidance(
        has_kind(seq, SegmentKind::VisualSource),
        has_kind(seq, SegmentKind::Text),
        opts.g_text,
        opts.g_image,
    )?;
    let subsets = spec.required_subsets();
    let mut cur = seq.clone();
    let mut steps = Vec::with_capacity(opts.steps);
    for k in 0..opts.steps {
        let masked: Vec<usize> = (0..m).filter(|&j| cur.tokens()[targets[j]].masked).collect();
        // Rounding can empty the mask before the last step.
        if masked.is_empty() {
            steps.push(PlanStep {
                masked_after: 0,
                revealed: Vec::new(),
                mean_norm: 0.0,
            });
            continue;
        }
        // Target rows are last in every restricted view.
        let mut z = BTreeMap::new();
        for &s in &subsets {
            let view = subset_view(&cur, s)?;
            let h = planner.hidden(store, &view)?;
            let off = view.len() - m;
            let rows: Vec<Vec<f64>> = masked.iter().map(|&j| h.row(off + j).to_vec()).collect();
            z.insert(s, Tensor::from_rows(&rows)?);
        }
        let pred = decode_embedding(decoder, store, &z, &spec, opts.decoder_steps, rng)?;
        let keep = mask_count(inference_mask_ratio(k, opts.steps)?, m);
        let reveal_n = masked.len().saturating_sub(keep);
        let mut order: Vec<usize> = (0..masked.len()).collect();
        match opts.reveal {
            RevealOrder::Confidence => {
                let score = inconsistency(decoder, store, &pred, &z[&spec.full_set()], rng)?;
                order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
            }
            RevealOrder::Random => rng.shuffle(&mut order),
        }
        let mut revealed: Vec<usize> = order[..reveal_n].iter().map(|&r| masked[r]).collect();
        for &r in &order[..reveal_n] {
            let i = targets[masked[r]];
            cur.set_embedding(i, pred.row(r))?;
            cur.set_masked(i, false)?;
        }
        revealed.sort_unstable();
        let mean_norm = if pred.rows() == 0 {
            0.0
        } else {
            (0..pred.rows())
                .map(|r| pred.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / pred.rows() as f64
        };
        steps.push(PlanStep {
            masked_after: cur.masked_count(),
            revealed,
            mean_norm,
        });
    }
    let hidden = planner.hidden(store, &cur)?;
    let rows: Vec<Vec<f64>> = targets.iter().map(|&i| cur.embeddings().row(i).to_vec()).collect();
    Ok(PlanResult {
        embeddings: Tensor::from_rows(&rows)?,
        hidden,
        sequence: cur,
        steps,
    })
}

/// Fully masked planning input from text ids and source embeddings.
pub fn planning_input(
    text: &[usize],
    sources: &[(crate::sequence::Grid3, Tensor<f64>)],
    target: crate::sequence::Grid3,
    embed_dim: usize,
) -> Result<TokenSequence> {
    let grids: Vec<_> = sources.iter().map(|(g, _)| *g).collect();
    let seq = crate::sequence::serialize(text.len(), &grids, target)?;
    let mut emb = Tensor::zeros(&[seq.len(), embed_dim]);
    let mut row = text.len();
    for (g, e) in sources {
        if e.rows() != g.count() || e.cols() != embed_dim {
            return Err(Error::dim("source embeddings", e.shape(), &[g.count(), embed_dim]));
        }
        emb.data_mut()[row * embed_dim..(row + g.count()) * embed_dim].copy_from_slice(e.data());
        row += g.count();
    }
    let mut seq = seq.with_text_ids(text)?.with_embeddings(emb)?;
    for i in seq.target_indices() {
        seq.set_masked(i, true)?;
    }
    Ok(seq)
}
