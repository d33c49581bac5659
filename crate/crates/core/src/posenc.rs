//! Rotary position encodings over `(t, h, w)` grids, with an optional
//! segment-dependent global phase, plus the additive segment-embedding
//! baseline.
//!
//! Rotation angles are additive: the segment phase for pair `j` is simply
//! added to the spatial angle of that pair, which is the same as multiplying
//! the two unit complex numbers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::sequence::{Grid3, Pos3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    /// Rotation pairs given to the `(t, h, w)` axes; sums to `head_dim / 2`.
    pub axis_split: [usize; 3],
    pub base: f64,
    pub segment_base: f64,
}

impl RopeConfig {
    /// Default split `(hd/8, 3hd/16, 3hd/16)` with the rounding remainder on `t`.
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            axis_split: default_axis_split(head_dim),
            base: 10_000.0,
            segment_base: 10_000.0,
        }
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if self.axis_split.iter().sum::<usize>() != self.pairs() {
            return Err(Error::Config(format!(
                "axis split {:?} must sum to {}",
                self.axis_split,
                self.pairs()
            )));
        }
        if !(self.base > 0.0 && self.segment_base > 0.0) {
            return Err(Error::Config("rope bases must be positive".into()));
        }
        Ok(())
    }

    /// Spatial angle of every pair at `pos`.
    pub fn spatial_angles(&self, pos: Pos3) -> Vec<f64> {
        let coords = [pos.t, pos.h, pos.w];
        let mut out = Vec::with_capacity(self.pairs());
        for (axis, &d) in self.axis_split.iter().enumerate() {
            for j in 0..d {
                let freq = self.base.powf(-(2.0 * j as f64) / (2.0 * d as f64));
                out.push(coords[axis] as f64 * freq);
            }
        }
        out
    }

    /// Segment phase of every pair for segment index `i`.
    pub fn segment_angles(&self, segment_index: usize) -> Vec<f64> {
        (0..self.pairs())
            .map(|j| {
                segment_index as f64
                    * self
                        .segment_base
                        .powf(-(2.0 * j as f64) / self.head_dim as f64)
            })
            .collect()
    }
}

pub fn default_axis_split(head_dim: usize) -> [usize; 3] {
    let pairs = head_dim / 2;
    let hw = 3 * head_dim / 16;
    let hw = hw.min(pairs / 2);
    [pairs - 2 * hw, hw, hw]
}

/// Which positional signal a transformer uses for its visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    /// 3D RoPE without any segment signal.
    Rope3d,
    /// 3D RoPE with a segment-dependent phase.
    SegmentRope3d,
    /// 3D RoPE plus a learned per-segment vector added at every block.
    SegmentEmbedding,
}

impl PosEncoding {
    pub fn uses_segment_phase(self) -> bool {
        matches!(self, PosEncoding::SegmentRope3d)
    }
}

/// Per-token rotation angles, one row per token and one column per pair.
#[derive(Debug, Clone)]
pub struct PhaseTable<S> {
    spatial: Tensor<f64>,
    segment: Tensor<f64>,
    cos: Arc<Tensor<S>>,
    sin: Arc<Tensor<S>>,
}

impl<S: Scalar> PhaseTable<S> {
    fn from_parts(spatial: Tensor<f64>, segment: Tensor<f64>) -> Self {
        let total = spatial.add(&segment).expect("same shape");
        let cos = Arc::new(total.map(f64::cos).as_matrix_of());
        let sin = Arc::new(total.map(f64::sin).as_matrix_of());
        Self {
            spatial,
            segment,
            cos,
            sin,
        }
    }

    /// Table for arbitrary token positions sharing one segment index.
    pub fn for_positions(cfg: &RopeConfig, positions: &[Pos3], segment_index: usize) -> Result<Self> {
        cfg.validate()?;
        let pairs = cfg.pairs();
        let n = positions.len();
        let mut spatial = Vec::with_capacity(n * pairs);
        for &p in positions {
            spatial.extend(cfg.spatial_angles(p));
        }
        let seg_row = cfg.segment_angles(segment_index);
        let segment: Vec<f64> = (0..n).flat_map(|_| seg_row.iter().copied()).collect();
        Ok(Self::from_parts(
            Tensor::new(vec![n, pairs], spatial)?,
            Tensor::new(vec![n, pairs], segment)?,
        ))
    }

    /// Identity rotation for `n` tokens.
    pub fn identity(cfg: &RopeConfig, n: usize) -> Self {
        let z = Tensor::zeros(&[n, cfg.pairs()]);
        Self::from_parts(z.clone(), z)
    }

    pub fn len(&self) -> usize {
        self.spatial.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> &Tensor<f64> {
        &self.spatial
    }

    pub fn segment(&self) -> &Tensor<f64> {
        &self.segment
    }

    /// Total angle `spatial + segment` for each `(token, pair)`.
    pub fn angles(&self) -> Tensor<f64> {
        self.spatial.add(&self.segment).expect("same shape")
    }

    pub fn cos(&self) -> Arc<Tensor<S>> {
        self.cos.clone()
    }

    pub fn sin(&self) -> Arc<Tensor<S>> {
        self.sin.clone()
    }

    /// Same spatial angles with the segment phase removed.
    pub fn without_segment(&self) -> Self {
        Self::from_parts(self.spatial.clone(), Tensor::zeros(self.segment.shape()))
    }

    /// Stacks tables row-wise (token order is preserved).
    pub fn concat(tables: &[&PhaseTable<S>]) -> Self {
        let stack = |f: &dyn Fn(&PhaseTable<S>) -> &Tensor<f64>| {
            let cols = tables.first().map_or(0, |t| f(t).cols());
            let mut data = Vec::new();
            for t in tables {
                data.extend_from_slice(f(t).data());
            }
            let rows = data.len() / cols.max(1);
            Tensor::new(vec![rows, cols], data).expect("consistent tables")
        };
        Self::from_parts(stack(&|t| &t.spatial), stack(&|t| &t.segment))
    }
}

trait AsMatrixOf {
    fn as_matrix_of<S: Scalar>(&self) -> Tensor<S>;
}

impl AsMatrixOf for Tensor<f64> {
    fn as_matrix_of<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            vec![self.rows(), self.cols()],
            self.data().iter().map(|&v| S::of(v)).collect(),
        )
        .expect("same size")
    }
}

/// Phase table for a full `(T, H, W)` grid in row-major `(t, h, w)` order.
pub fn build_phase_table<S: Scalar>(
    cfg: &RopeConfig,
    grid: Grid3,
    segment_index: usize,
) -> Result<PhaseTable<S>> {
    if grid.count() == 0 {
        return Err(Error::dim("phase table grid", &[grid.t, grid.h, grid.w], &[1, 1, 1]));
    }
    let positions: Vec<Pos3> = grid.positions().collect();
    PhaseTable::for_positions(cfg, &positions, segment_index)
}

/// Rotates each consecutive pair of every row of `x: [n, head_dim]`.
pub fn apply_rope<S: Scalar>(x: &Tensor<S>, table: &PhaseTable<S>) -> Result<Tensor<S>> {
    let pairs = table.cos.cols();
    if x.cols() != 2 * pairs || x.rows() != table.len() {
        return Err(Error::dim("apply_rope", x.shape(), &[table.len(), 2 * pairs]));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (c, s) = (table.cos.row(r), table.sin.row(r));
        let row = out.row_mut(r);
        for j in 0..pairs {
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * c[j] - b * s[j];
            row[2 * j + 1] = a * s[j] + b * c[j];
        }
    }
    Ok(out)
}

/// Adds the learned vector for `segment_index` to every row of `hidden`.
pub fn segment_embedding_baseline<S: Scalar>(
    hidden: &Tensor<S>,
    embeddings: &Tensor<S>,
    segment_index: usize,
) -> Result<Tensor<S>> {
    if segment_index >= embeddings.rows() {
        return Err(Error::Index {
            index: segment_index,
            len: embeddings.rows(),
        });
    }
    if embeddings.cols() != hidden.cols() {
        return Err(Error::dim("segment embedding", hidden.shape(), embeddings.shape()));
    }
    let e = embeddings.row(segment_index);
    let mut out = hidden.clone();
    for r in 0..out.rows() {
        for (v, &ev) in out.row_mut(r).iter_mut().zip(e) {
            *v = *v + ev;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn cfg8() -> RopeConfig {
        RopeConfig::new(8)
    }

    #[test]
    fn default_splits() {
        assert_eq!(default_axis_split(16), [2, 3, 3]);
        assert_eq!(default_axis_split(8), [2, 1, 1]);
        assert_eq!(default_axis_split(64), [8, 12, 12]);
        for hd in (2..=128).step_by(2) {
            assert!(RopeConfig::new(hd).validate().is_ok(), "hd {hd}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg8();
        c.head_dim = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg8();
        c.axis_split = [1, 1, 1];
        assert!(c.validate().is_err());
        let mut c = cfg8();
        c.base = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn origin_segment_zero_is_identity() {
        let t: PhaseTable<f64> = build_phase_table(&cfg8(), Grid3::new(1, 1, 1), 0).unwrap();
        assert!(t.angles().data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn segment_zero_equals_standard_table() {
        let cfg = cfg8();
        let t: PhaseTable<f64> = build_phase_table(&cfg, Grid3::new(2, 3, 2), 0).unwrap();
        assert_eq!(t.angles(), t.without_segment().angles());
    }

    #[test]
    fn segment_two_first_pair_phase() {
        let t: PhaseTable<f64> = build_phase_table(&cfg8(), Grid3::new(1, 1, 1), 2).unwrap();
        assert_eq!(t.segment().at(0, 0), 2.0);
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 8]);
        let table = PhaseTable::identity(&cfg8(), 4);
        assert_eq!(apply_rope(&x, &table).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch() {
        let x: Tensor<f64> = Tensor::zeros(&[1, 6]);
        let table = PhaseTable::identity(&cfg8(), 1);
        assert!(matches!(apply_rope(&x, &table), Err(Error::Dimension { .. })));
    }

    #[test]
    fn segment_embedding_is_additive() {
        let mut rng = Rng::new(9);
        let h: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let zero = Tensor::zeros(&[2, 4]);
        assert_eq!(segment_embedding_baseline(&h, &zero, 1).unwrap(), h);
        let e: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let out1 = segment_embedding_baseline(&h, &e, 1).unwrap();
        let out2 = segment_embedding_baseline(&h, &e, 2).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(out1.at(r, c), h.at(r, c) + e.at(1, c));
                let d = out1.at(r, c) - out2.at(r, c);
                assert!((d - (e.at(1, c) - e.at(2, c))).abs() < 1e-15);
            }
        }
        assert!(matches!(
            segment_embedding_baseline(&h, &e, 3),
            Err(Error::Index { .. })
        ));
    }
}
