//! Unified token sequence: text, then source visual segments, then the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoolMatrix, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid3 {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn count(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos3> + '_ {
        (0..self.t).flat_map(move |t| {
            (0..self.h).flat_map(move |h| (0..self.w).map(move |w| Pos3 { t, h, w }))
        })
    }

    fn check(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::dim("grid", &[self.t, self.h, self.w], &[1, 1, 1]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Text(usize),
    Visual(Pos3),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    VisualSource,
    VisualTarget,
}

/// One contiguous run of tokens in the canonical layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentDesc {
    Text { len: usize },
    /// `index` is 1-based; 0 is reserved for the target.
    Source { index: usize, grid: Grid3 },
    Target { grid: Grid3 },
}

impl SegmentDesc {
    pub fn kind(&self) -> SegmentKind {
        match self {
            SegmentDesc::Text { .. } => SegmentKind::Text,
            SegmentDesc::Source { .. } => SegmentKind::VisualSource,
            SegmentDesc::Target { .. } => SegmentKind::VisualTarget,
        }
    }

    /// Visual segment index (target = 0, sources = 1..N); `None` for text.
    pub fn segment_index(&self) -> Option<usize> {
        match self {
            SegmentDesc::Text { .. } => None,
            SegmentDesc::Source { index, .. } => Some(*index),
            SegmentDesc::Target { .. } => Some(0),
        }
    }

    pub fn token_count(&self) -> usize {
        match self {
            SegmentDesc::Text { len } => *len,
            SegmentDesc::Source { grid, .. } | SegmentDesc::Target { grid } => grid.count(),
        }
    }

    pub fn grid(&self) -> Option<Grid3> {
        match self {
            SegmentDesc::Text { .. } => None,
            SegmentDesc::Source { grid, .. } | SegmentDesc::Target { grid } => Some(*grid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// Slot of the owning segment in `TokenSequence::layout`.
    pub segment: usize,
    pub kind: SegmentKind,
    pub position: Position,
    /// Vocabulary id for text tokens; 0 for visual tokens.
    pub token_id: usize,
    pub masked: bool,
}

impl TokenRecord {
    pub fn segment_index(&self, layout: &[SegmentDesc]) -> Option<usize> {
        layout[self.segment].segment_index()
    }
}

/// Token stream with per-token metadata and an `[n, d]` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    layout: Vec<SegmentDesc>,
    tokens: Vec<TokenRecord>,
    embeddings: Tensor<f64>,
}

/// Lays out `text_len` text tokens, the source grids (segment indices
/// 1..=N in order) and the target grid (segment index 0).
pub fn serialize(text_len: usize, source_grids: &[Grid3], target_grid: Grid3) -> Result<TokenSequence> {
    target_grid.check()?;
    let mut layout = Vec::with_capacity(source_grids.len() + 2);
    if text_len > 0 {
        layout.push(SegmentDesc::Text { len: text_len });
    }
    for (i, g) in source_grids.iter().enumerate() {
        g.check()?;
        layout.push(SegmentDesc::Source {
            index: i + 1,
            grid: *g,
        });
    }
    layout.push(SegmentDesc::Target { grid: target_grid });
    TokenSequence::from_layout(layout)
}

impl TokenSequence {
    /// Rebuilds a sequence from a layout; the layout must be canonical.
    pub fn from_layout(layout: Vec<SegmentDesc>) -> Result<Self> {
        validate_layout(&layout)?;
        let mut tokens = Vec::new();
        for (slot, seg) in layout.iter().enumerate() {
            match seg {
                SegmentDesc::Text { len } => {
                    tokens.extend((0..*len).map(|l| TokenRecord {
                        segment: slot,
                        kind: SegmentKind::Text,
                        position: Position::Text(l),
                        token_id: 0,
                        masked: false,
                    }));
                }
                SegmentDesc::Source { grid, .. } | SegmentDesc::Target { grid } => {
                    let kind = seg.kind();
                    tokens.extend(grid.positions().map(|p| TokenRecord {
                        segment: slot,
                        kind,
                        position: Position::Visual(p),
                        token_id: 0,
                        masked: false,
                    }));
                }
            }
        }
        let n = tokens.len();
        Ok(Self {
            layout,
            tokens,
            embeddings: Tensor::zeros(&[n, 0]),
        })
    }

    /// Text-only sequence (used for language-only batches).
    pub fn text_only(len: usize) -> Result<Self> {
        Self::from_layout(vec![SegmentDesc::Text { len }])
    }

    pub fn layout(&self) -> &[SegmentDesc] {
        &self.layout
    }

    /// The layout this sequence was built from.
    pub fn describe(&self) -> Vec<SegmentDesc> {
        self.layout.clone()
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor<f64> {
        &self.embeddings
    }

    pub fn with_embeddings(mut self, embeddings: Tensor<f64>) -> Result<Self> {
        if embeddings.rows() != self.tokens.len() || embeddings.shape().len() != 2 {
            return Err(Error::dim(
                "embeddings",
                &[self.tokens.len()],
                embeddings.shape(),
            ));
        }
        self.embeddings = embeddings;
        Ok(self)
    }

    pub fn with_text_ids(mut self, ids: &[usize]) -> Result<Self> {
        let text: Vec<usize> = self.indices_of(SegmentKind::Text).collect();
        if text.len() != ids.len() {
            return Err(Error::dim("text ids", &[text.len()], &[ids.len()]));
        }
        for (i, &id) in text.iter().zip(ids) {
            self.tokens[*i].token_id = id;
        }
        Ok(self)
    }

    pub fn indices_of(&self, kind: SegmentKind) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.kind == kind)
            .map(|(i, _)| i)
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.indices_of(SegmentKind::VisualTarget).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].masked)
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.masked).count()
    }

    /// Sets the mask flag of target token `i` (index into `tokens`).
    pub fn set_masked(&mut self, i: usize, masked: bool) -> Result<()> {
        if self.tokens[i].kind != SegmentKind::VisualTarget && masked {
            return Err(Error::Contract("only target tokens can be masked".into()));
        }
        self.tokens[i].masked = masked;
        Ok(())
    }

    /// Overwrites the embedding row of token `i`.
    pub fn set_embedding(&mut self, i: usize, row: &[f64]) -> Result<()> {
        if row.len() != self.embeddings.cols() {
            return Err(Error::dim("set_embedding", &[self.embeddings.cols()], &[row.len()]));
        }
        self.embeddings.row_mut(i).copy_from_slice(row);
        Ok(())
    }
}

fn validate_layout(layout: &[SegmentDesc]) -> Result<()> {
    let mut stage = 0; // 0 text, 1 sources, 2 target
    let mut next_source = 1;
    let mut targets = 0;
    for seg in layout {
        match seg {
            SegmentDesc::Text { .. } => {
                if stage > 0 {
                    return Err(Error::Layout("text must come first".into()));
                }
                stage = 1;
            }
            SegmentDesc::Source { index, grid } => {
                grid.check()?;
                if stage > 1 || *index != next_source {
                    return Err(Error::Layout(format!(
                        "source segment {index} out of canonical order"
                    )));
                }
                next_source += 1;
                stage = 1;
            }
            SegmentDesc::Target { grid } => {
                grid.check()?;
                targets += 1;
                stage = 2;
            }
        }
    }
    if targets > 1 {
        return Err(Error::Layout("more than one target segment".into()));
    }
    if targets == 0 && layout.iter().any(|s| matches!(s, SegmentDesc::Source { .. })) {
        return Err(Error::Layout("sources without a target".into()));
    }
    Ok(())
}

/// Segment-wise hybrid attention mask (`allow[query][key]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub allow: BoolMatrix,
}

/// Causal inside text, bidirectional inside each visual segment, and full
/// visibility of every earlier segment.
pub fn build_mask(seq: &TokenSequence) -> AttentionMask {
    let toks = seq.tokens();
    let n = toks.len();
    let allow = BoolMatrix::from_fn(n, n, |q, k| {
        let (sq, sk) = (toks[q].segment, toks[k].segment);
        match sk.cmp(&sq) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => toks[q].kind != SegmentKind::Text || k <= q,
        }
    });
    AttentionMask { allow }
}

/// `round(ratio * m)` with halves rounded up.
pub fn mask_count(ratio: f64, m: usize) -> usize {
    ((ratio * m as f64) + 0.5).floor().clamp(0.0, m as f64) as usize
}

/// Masks a uniformly chosen `round(ratio * M)` subset of the target tokens and
/// overwrites their embeddings with `mask_embedding` (when the sequence
/// carries embeddings). Other tokens are untouched.
pub fn apply_target_mask(
    seq: &TokenSequence,
    ratio: f64,
    mask_embedding: &[f64],
    rng: &mut Rng,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!("mask ratio {ratio} not in [0, 1]")));
    }
    let mut out = seq.clone();
    let mut targets = out.target_indices();
    let count = mask_count(ratio, targets.len());
    for &i in &targets {
        out.tokens[i].masked = false;
    }
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    for i in 0..count {
        let j = i + rng.below(targets.len() - i);
        targets.swap(i, j);
    }
    let has_emb = out.embeddings.cols() > 0;
    if has_emb && mask_embedding.len() != out.embeddings.cols() {
        return Err(Error::dim(
            "mask embedding",
            &[out.embeddings.cols()],
            &[mask_embedding.len()],
        ));
    }
    for &i in &targets[..count] {
        out.tokens[i].masked = true;
        if has_emb {
            out.embeddings.row_mut(i).copy_from_slice(mask_embedding);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(t: usize, h: usize, w: usize) -> Grid3 {
        Grid3::new(t, h, w)
    }

    #[test]
    fn counts_and_segment_indices() {
        let s = serialize(3, &[], g(1, 2, 2)).unwrap();
        assert_eq!(s.len(), 7);
        assert!(s.tokens()[3..]
            .iter()
            .all(|t| t.segment_index(s.layout()) == Some(0)));

        let s = serialize(2, &[g(1, 2, 2)], g(1, 2, 2)).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.tokens()[2..6]
            .iter()
            .all(|t| t.segment_index(s.layout()) == Some(1)));

        let s = serialize(4, &[g(2, 2, 2), g(1, 2, 2)], g(2, 2, 2)).unwrap();
        assert_eq!(s.len(), 24);
        let idx: Vec<Option<usize>> = s.tokens().iter().map(|t| t.segment_index(s.layout())).collect();
        let mut expect = vec![None; 4];
        expect.extend(vec![Some(1); 8]);
        expect.extend(vec![Some(2); 4]);
        expect.extend(vec![Some(0); 8]);
        assert_eq!(idx, expect);
    }

    #[test]
    fn zero_sized_grid_is_rejected() {
        assert!(matches!(
            serialize(1, &[], g(0, 2, 2)),
            Err(Error::Dimension { .. })
        ));
        assert!(serialize(1, &[g(1, 0, 1)], g(1, 1, 1)).is_err());
    }

    #[test]
    fn describe_round_trips() {
        let s = serialize(4, &[g(2, 2, 2), g(1, 3, 2)], g(2, 2, 2)).unwrap();
        let back = TokenSequence::from_layout(s.describe()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn positions_are_unique_per_segment() {
        let s = serialize(3, &[g(2, 2, 2)], g(2, 2, 2)).unwrap();
        let mut keys: Vec<(usize, Position)> =
            s.tokens().iter().map(|t| (t.segment, t.position)).collect();
        let n = keys.len();
        keys.sort_by_key(|(s, p)| (*s, format!("{p:?}")));
        keys.dedup();
        assert_eq!(keys.len(), n);
    }

    #[test]
    fn text_only_mask_is_causal() {
        let s = TokenSequence::text_only(4).unwrap();
        let m = build_mask(&s).allow;
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(m.get(q, k), k <= q);
            }
        }
    }

    #[test]
    fn single_target_mask_is_dense() {
        let s = serialize(0, &[], g(1, 2, 2)).unwrap();
        let m = build_mask(&s).allow;
        assert!((0..4).all(|q| (0..4).all(|k| m.get(q, k))));
    }

    #[test]
    fn hybrid_mask_hand_enumerated() {
        let s = serialize(2, &[g(1, 1, 2)], g(1, 1, 2)).unwrap();
        let m = build_mask(&s).allow;
        // 1-based rows/columns as written out by hand.
        let expect: [&[usize]; 6] = [&[1], &[1, 2], &[1, 2, 3, 4], &[1, 2, 3, 4], &[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4, 5, 6]];
        for (q, cols) in expect.iter().enumerate() {
            for k in 0..6 {
                assert_eq!(m.get(q, k), cols.contains(&(k + 1)), "row {} col {}", q + 1, k + 1);
            }
        }
    }

    #[test]
    fn mask_boundaries() {
        let s = serialize(2, &[g(1, 2, 2)], g(2, 2, 2)).unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(apply_target_mask(&s, 0.0, &[], &mut rng).unwrap().masked_count(), 0);
        let all = apply_target_mask(&s, 1.0, &[], &mut rng).unwrap();
        assert_eq!(all.masked_count(), 8);
        assert!(all.masked_indices().iter().all(|&i| i >= 6));
    }

    #[test]
    fn half_mask_is_uniform() {
        let s = serialize(0, &[], g(2, 2, 2)).unwrap();
        let mut rng = Rng::new(42);
        let mut hits = [0usize; 8];
        let trials = 10_000;
        for _ in 0..trials {
            let m = apply_target_mask(&s, 0.5, &[], &mut rng).unwrap();
            assert_eq!(m.masked_count(), 4);
            for i in m.masked_indices() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.02, "freq {f}");
        }
    }

    #[test]
    fn masking_leaves_other_tokens_bitwise_equal() {
        let s = serialize(2, &[g(1, 2, 2)], g(1, 2, 2)).unwrap();
        let mut rng = Rng::new(1);
        let emb = rng.normal_tensor::<f64>(&[s.len(), 3]);
        let s = s.with_embeddings(emb).unwrap();
        let m = apply_target_mask(&s, 0.75, &[9.0, 9.0, 9.0], &mut rng).unwrap();
        for i in 0..6 {
            assert_eq!(m.embeddings().row(i), s.embeddings().row(i));
        }
        for i in m.masked_indices() {
            assert_eq!(m.embeddings().row(i), &[9.0, 9.0, 9.0]);
        }
        assert_eq!(m.masked_count(), 3);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(mask_count(0.5, 5), 3);
        assert_eq!(mask_count(0.25, 2), 1);
        assert_eq!(mask_count(0.0, 9), 0);
        assert_eq!(mask_count(1.0, 9), 9);
    }
}
