//! Multi-condition classifier-free guidance.
//!
//! Conditions are added in the fixed order `vid, img, txt, tgt`. The
//! prediction under the first `k` present conditions is `eps_k`, the increment
//! of condition `k` is `eps_k - eps_{k-1}`, and the guided output is
//! `eps_0 + sum_k w_k * delta_k`. It is evaluated as
//! `eps_full + sum_k (w_k - 1) * delta_k`, which is the same quantity and makes
//! unit weights return `eps_full` exactly.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::schedules::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Vid,
    Img,
    Txt,
    Tgt,
}

impl Condition {
    pub const ORDER: [Condition; 4] = [Condition::Vid, Condition::Img, Condition::Txt, Condition::Tgt];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Vid => "vid",
            Condition::Img => "img",
            Condition::Txt => "txt",
            Condition::Tgt => "tgt",
        }
    }
}

/// A subset of conditions, used as the key of a forwards map.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct CondSet(u8);

impl CondSet {
    pub const EMPTY: CondSet = CondSet(0);

    pub fn of(conds: &[Condition]) -> Self {
        CondSet(conds.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn with(self, c: Condition) -> Self {
        CondSet(self.0 | c.bit())
    }

    pub fn contains(self, c: Condition) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn conditions(self) -> impl Iterator<Item = Condition> {
        Condition::ORDER.into_iter().filter(move |c| self.contains(*c))
    }
}

impl fmt::Debug for CondSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for CondSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.conditions().map(Condition::name).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Four-increment guidance weights with per-condition presence flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub present: [bool; 4],
    /// Weights in `vid, img, txt, tgt` order; absent entries are ignored.
    pub weights: [f64; 4],
}

impl GuidanceSpec {
    pub fn new(present: [bool; 4], weights: [f64; 4]) -> Result<Self> {
        let spec = Self { present, weights };
        spec.validate()?;
        Ok(spec)
    }

    /// All four conditions with unit weights.
    pub fn unit() -> Self {
        Self {
            present: [true; 4],
            weights: [1.0; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (c, w) in Condition::ORDER.iter().zip(self.weights) {
            if !w.is_finite() {
                return Err(Error::Validation(vec![format!("weight for {} is not finite", c.name())]));
            }
        }
        Ok(())
    }

    pub fn weight(&self, c: Condition) -> f64 {
        self.weights[c as usize]
    }

    pub fn is_present(&self, c: Condition) -> bool {
        self.present[c as usize]
    }

    pub fn present_conditions(&self) -> impl Iterator<Item = Condition> + '_ {
        Condition::ORDER.into_iter().filter(|c| self.is_present(*c))
    }

    /// Nested subsets that must be evaluated, from empty to full.
    pub fn required_subsets(&self) -> Vec<CondSet> {
        let mut out = vec![CondSet::EMPTY];
        let mut cur = CondSet::EMPTY;
        for c in self.present_conditions() {
            cur = cur.with(c);
            out.push(cur);
        }
        out
    }

    pub fn full_set(&self) -> CondSet {
        *self.required_subsets().last().expect("non-empty")
    }

    /// Whether every weight is one, in which case only the full forward is needed.
    pub fn is_unit(&self) -> bool {
        self.present_conditions().all(|c| self.weight(c) == 1.0)
    }
}

/// Guided prediction from a map of subset forwards.
pub fn compose<S: Scalar>(spec: &GuidanceSpec, forwards: &BTreeMap<CondSet, Tensor<S>>) -> Result<Tensor<S>> {
    spec.validate()?;
    let subsets = spec.required_subsets();
    let get = |k: &CondSet| {
        forwards
            .get(k)
            .ok_or_else(|| Error::Composition(format!("missing forward for subset {k}")))
    };
    let preds = subsets.iter().map(get).collect::<Result<Vec<_>>>()?;
    let full = preds[preds.len() - 1];
    for p in &preds {
        if p.shape() != full.shape() {
            return Err(Error::dim("compose", p.shape(), full.shape()));
        }
    }
    let mut out = full.clone();
    for (i, c) in spec.present_conditions().enumerate() {
        let w = S::of(spec.weight(c) - 1.0);
        if w == S::zero() {
            continue;
        }
        let (hi, lo) = (preds[i + 1].data(), preds[i].data());
        for ((o, &a), &b) in out.data_mut().iter_mut().zip(hi).zip(lo) {
            *o = *o + w * (a - b);
        }
    }
    Ok(out)
}

/// Optional correction applied to the guided prediction.
pub trait PostCompose<S> {
    fn apply(&self, guided: Tensor<S>, conditional: &Tensor<S>) -> Tensor<S>;
}

/// Default hook: returns the guided prediction unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPostCompose;

impl<S> PostCompose<S> for NoPostCompose {
    fn apply(&self, guided: Tensor<S>, _conditional: &Tensor<S>) -> Tensor<S> {
        guided
    }
}

/// Table rows of inference guidance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRow {
    pub steps: usize,
    pub txt: f64,
    pub vid: Option<f64>,
    pub img: f64,
    pub tgt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceTable {
    pub t2v: GuidanceRow,
    pub s2v: GuidanceRow,
    pub v2v: GuidanceRow,
    pub rv2v: GuidanceRow,
}

impl Default for GuidanceTable {
    fn default() -> Self {
        Self {
            t2v: GuidanceRow {
                steps: 60,
                txt: 4.0,
                vid: None,
                img: 1.0,
                tgt: 1.0,
            },
            s2v: GuidanceRow {
                steps: 40,
                txt: 4.0,
                vid: Some(1.25),
                img: 2.5,
                tgt: 1.5,
            },
            v2v: GuidanceRow {
                steps: 40,
                txt: 4.0,
                vid: Some(1.25),
                img: 1.25,
                tgt: 0.5,
            },
            rv2v: GuidanceRow {
                steps: 40,
                txt: 4.0,
                vid: Some(1.25),
                img: 3.0,
                tgt: 1.5,
            },
        }
    }
}

/// Conditions a task actually supplies to the renderer.
pub fn task_conditions(task: TaskKind) -> [bool; 4] {
    // vid = source segment, img = reference frame, txt = instruction, tgt = plan.
    match task {
        TaskKind::T2I | TaskKind::T2V => [false, false, true, true],
        TaskKind::I2V => [false, true, true, true],
        TaskKind::I2I | TaskKind::V2V => [true, false, true, true],
        TaskKind::IV2V => [true, true, true, true],
    }
}

impl GuidanceTable {
    pub fn row(&self, task: TaskKind) -> GuidanceRow {
        match task {
            TaskKind::T2I | TaskKind::T2V => self.t2v,
            TaskKind::I2V => self.s2v,
            TaskKind::I2I | TaskKind::V2V => self.v2v,
            TaskKind::IV2V => self.rv2v,
        }
    }

    pub fn spec(&self, task: TaskKind) -> Result<GuidanceSpec> {
        let row = self.row(task);
        let mut present = task_conditions(task);
        if row.vid.is_none() {
            present[Condition::Vid as usize] = false;
        }
        GuidanceSpec::new(present, [row.vid.unwrap_or(1.0), row.img, row.txt, row.tgt])
    }
}

/// Weights of one branch of the dual-branch fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub full: f64,
    pub text: f64,
    /// Image weight for the image branch, video weight for the video branch.
    pub visual: f64,
}

impl BranchWeights {
    pub fn conditional() -> Self {
        Self {
            full: 1.0,
            text: 0.0,
            visual: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualBranchSpec {
    pub alpha: f64,
    pub beta: f64,
    pub image_branch: BranchWeights,
    pub video_branch: BranchWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub identity: &'static str,
    pub residual: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violated (residual {:.3e})", self.identity, self.residual)
    }
}

/// Largest residual accepted as satisfying an identity.
pub const CONSTRAINT_TOL: f64 = 1e-12;

impl DualBranchSpec {
    /// Every violated identity with its residual; empty when valid.
    pub fn validate(&self) -> Vec<Violation> {
        let checks = [
            (
                "w_full - w_text - w_image = 1",
                self.image_branch.full - self.image_branch.text - self.image_branch.visual - 1.0,
            ),
            (
                "w_full - w_text - w_video = 1",
                self.video_branch.full - self.video_branch.text - self.video_branch.visual - 1.0,
            ),
            ("alpha + beta = 1", self.alpha + self.beta - 1.0),
        ];
        checks
            .into_iter()
            .filter(|(_, r)| r.is_nan() || r.abs() > CONSTRAINT_TOL)
            .map(|(identity, r)| Violation {
                identity,
                residual: r.abs(),
            })
            .collect()
    }
}

/// The six predictions consumed by the dual-branch fusion.
#[derive(Debug, Clone)]
pub struct DualForwards<S> {
    /// Image-branch text with the reference image.
    pub image_full: Tensor<S>,
    /// Reference image only.
    pub image_no_text: Tensor<S>,
    /// Image-branch text only.
    pub image_no_visual: Tensor<S>,
    /// Video-branch text with the source video.
    pub video_full: Tensor<S>,
    /// Source video only.
    pub video_no_text: Tensor<S>,
    /// Video-branch text only.
    pub video_no_visual: Tensor<S>,
}

/// Dual-branch fusion of an image-conditioned and a video-conditioned
/// guided prediction.
///
/// Each branch `w_f a - w_t b - w_v c` is evaluated as
/// `a + w_t (a - b) + w_v (a - c)` and the mix as `B + alpha (A - B)`; both
/// are equal to the weighted sums under the validated constraints, and six
/// identical inputs come back unchanged bit for bit.
pub fn compose_dual_branch<S: Scalar>(spec: &DualBranchSpec, f: &DualForwards<S>) -> Result<Tensor<S>> {
    let violations = spec.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations.iter().map(ToString::to_string).collect()));
    }
    let shape = f.image_full.shape();
    for t in [
        &f.image_no_text,
        &f.image_no_visual,
        &f.video_full,
        &f.video_no_text,
        &f.video_no_visual,
    ] {
        if t.shape() != shape {
            return Err(Error::dim("compose_dual_branch", t.shape(), shape));
        }
    }
    let branch = |w: BranchWeights, a: &Tensor<S>, b: &Tensor<S>, c: &Tensor<S>| {
        let (wt, wv) = (S::of(w.text), S::of(w.visual));
        let mut out = a.clone();
        for (((o, &a), &b), &c) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()).zip(c.data()) {
            *o = a + wt * (a - b) + wv * (a - c);
        }
        out
    };
    let img = branch(spec.image_branch, &f.image_full, &f.image_no_text, &f.image_no_visual);
    let vid = branch(spec.video_branch, &f.video_full, &f.video_no_text, &f.video_no_visual);
    let alpha = S::of(spec.alpha);
    vid.zip_map(&img, |v, i| v + alpha * (i - v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn forwards(spec: &GuidanceSpec, rng: &mut Rng) -> BTreeMap<CondSet, Tensor<f64>> {
        spec.required_subsets()
            .into_iter()
            .map(|k| (k, rng.normal_tensor(&[2, 3])))
            .collect()
    }

    #[test]
    fn subsets_are_nested_prefixes() {
        let spec = GuidanceTable::default().spec(TaskKind::T2V).unwrap();
        let subs = spec.required_subsets();
        assert_eq!(subs.len(), 3);
        assert!(subs.iter().all(|s| !s.contains(Condition::Vid)));
        let full = GuidanceSpec::unit().required_subsets();
        assert_eq!(
            full,
            vec![
                CondSet::EMPTY,
                CondSet::of(&[Condition::Vid]),
                CondSet::of(&[Condition::Vid, Condition::Img]),
                CondSet::of(&[Condition::Vid, Condition::Img, Condition::Txt]),
                CondSet::of(&Condition::ORDER),
            ]
        );
    }

    #[test]
    fn unit_and_zero_weights() {
        let mut rng = Rng::new(2);
        let spec = GuidanceSpec::unit();
        let f = forwards(&spec, &mut rng);
        assert_eq!(compose(&spec, &f).unwrap(), f[&spec.full_set()]);
        let zero = GuidanceSpec::new([true; 4], [0.0; 4]).unwrap();
        let out = compose(&zero, &f).unwrap();
        assert!(out.max_abs_diff(&f[&CondSet::EMPTY]) < 1e-12);
    }

    #[test]
    fn missing_subset_is_named() {
        let spec = GuidanceSpec::unit();
        let mut rng = Rng::new(4);
        let mut f = forwards(&spec, &mut rng);
        f.remove(&CondSet::of(&[Condition::Vid, Condition::Img]));
        let err = compose(&spec, &f).unwrap_err();
        assert!(matches!(&err, Error::Composition(m) if m.contains("{vid,img}")), "{err}");
    }

    #[test]
    fn non_finite_weight_rejected() {
        assert!(GuidanceSpec::new([true; 4], [1.0, f64::NAN, 1.0, 1.0]).is_err());
    }

    #[test]
    fn dual_branch_degenerate_cases() {
        let mut rng = Rng::new(6);
        let mut t = || rng.normal_tensor::<f64>(&[3, 2]);
        let f = DualForwards {
            image_full: t(),
            image_no_text: t(),
            image_no_visual: t(),
            video_full: t(),
            video_no_text: t(),
            video_no_visual: t(),
        };
        let c = BranchWeights::conditional();
        let pure_image = DualBranchSpec {
            alpha: 1.0,
            beta: 0.0,
            image_branch: c,
            video_branch: c,
        };
        assert_eq!(compose_dual_branch(&pure_image, &f).unwrap(), f.image_full);
        let half = DualBranchSpec {
            alpha: 0.5,
            beta: 0.5,
            ..pure_image
        };
        let avg = f.image_full.add(&f.video_full).unwrap().scale(0.5);
        assert!(compose_dual_branch(&half, &f).unwrap().max_abs_diff(&avg) < 1e-15);
    }

    #[test]
    fn validation_reports_residuals() {
        let ok = BranchWeights {
            full: 3.0,
            text: 1.0,
            visual: 1.0,
        };
        let spec = DualBranchSpec {
            alpha: 0.7,
            beta: 0.4,
            image_branch: ok,
            video_branch: ok,
        };
        let v = spec.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].identity, "alpha + beta = 1");
        assert!((v[0].residual - 0.1).abs() < 1e-12);
        let f = DualForwards {
            image_full: Tensor::<f64>::zeros(&[1, 1]),
            image_no_text: Tensor::zeros(&[1, 1]),
            image_no_visual: Tensor::zeros(&[1, 1]),
            video_full: Tensor::zeros(&[1, 1]),
            video_no_text: Tensor::zeros(&[1, 1]),
            video_no_visual: Tensor::zeros(&[1, 1]),
        };
        assert!(matches!(compose_dual_branch(&spec, &f), Err(Error::Validation(_))));
    }

    #[test]
    fn table_rows_map_tasks() {
        let table = GuidanceTable::default();
        assert_eq!(table.row(TaskKind::I2V).img, 2.5);
        assert_eq!(table.row(TaskKind::T2V).steps, 60);
        assert_eq!(table.row(TaskKind::V2V).tgt, 0.5);
        let s = table.spec(TaskKind::IV2V).unwrap();
        assert_eq!(s.weights, [1.25, 3.0, 4.0, 1.5]);
        assert!(!table.spec(TaskKind::T2V).unwrap().is_present(Condition::Vid));
    }

    #[test]
    fn no_op_hook() {
        let x = Tensor::<f64>::full(&[1, 2], 3.0);
        assert_eq!(NoPostCompose.apply(x.clone(), &x), x);
    }
}
