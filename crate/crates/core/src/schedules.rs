//! Mask-ratio and timestep schedules.
//!
//! Time convention used across the crate: `t = 0` is pure noise and `t = 1`
//! is clean data. The weighting densities and the shift map are written in
//! terms of the *noise level* `sigma = 1 - t`, which is the variable the
//! per-task defaults were tuned for; [`sample_timestep`] and
//! [`inference_time_grid`] do the conversion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    T2I,
    T2V,
    I2I,
    I2V,
    V2V,
    IV2V,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::T2I,
        TaskKind::T2V,
        TaskKind::I2I,
        TaskKind::I2V,
        TaskKind::V2V,
        TaskKind::IV2V,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2I => "t2i",
            TaskKind::T2V => "t2v",
            TaskKind::I2I => "i2i",
            TaskKind::I2V => "i2v",
            TaskKind::V2V => "v2v",
            TaskKind::IV2V => "iv2v",
        }
    }

    /// Whether the output is a single frame.
    pub fn is_image(self) -> bool {
        matches!(self, TaskKind::T2I | TaskKind::I2I)
    }

    /// Whether the task consumes a source video or image.
    pub fn has_source(self) -> bool {
        !matches!(self, TaskKind::T2I | TaskKind::T2V)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Per-task Beta parameters for training mask ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRatioConfig {
    pub t2i: BetaParams,
    pub t2v: BetaParams,
    pub i2i: BetaParams,
    pub i2v: BetaParams,
    pub v2v: BetaParams,
    pub iv2v: BetaParams,
}

impl Default for MaskRatioConfig {
    fn default() -> Self {
        let b = |alpha, beta| BetaParams { alpha, beta };
        Self {
            t2i: b(5.0, 1.1),
            t2v: b(8.0, 1.05),
            i2i: b(8.0, 1.05),
            i2v: b(10.0, 1.0),
            v2v: b(12.0, 0.9),
            iv2v: b(12.0, 0.9),
        }
    }
}

impl MaskRatioConfig {
    pub fn get(&self, task: TaskKind) -> BetaParams {
        match task {
            TaskKind::T2I => self.t2i,
            TaskKind::T2V => self.t2v,
            TaskKind::I2I => self.i2i,
            TaskKind::I2V => self.i2v,
            TaskKind::V2V => self.v2v,
            TaskKind::IV2V => self.iv2v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in TaskKind::ALL {
            let p = self.get(t);
            if !(p.alpha > 0.0 && p.beta > 0.0) {
                return Err(Error::Config(format!("beta parameters for {t} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    LogitNormal { m: f64, s: f64 },
    Mode { s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepParams {
    pub weighting: Weighting,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepConfig {
    pub t2i: TimestepParams,
    pub t2v: TimestepParams,
    pub i2i: TimestepParams,
    pub i2v: TimestepParams,
    pub v2v: TimestepParams,
    pub iv2v: TimestepParams,
}

impl Default for TimestepConfig {
    fn default() -> Self {
        let ln = |shift| TimestepParams {
            weighting: Weighting::LogitNormal { m: 0.5, s: 1.0 },
            shift,
        };
        let mode = |shift| TimestepParams {
            weighting: Weighting::Mode { s: 1.29 },
            shift,
        };
        Self {
            t2i: ln(3.0),
            i2i: ln(4.0),
            t2v: mode(3.0),
            i2v: mode(5.0),
            v2v: mode(5.0),
            iv2v: mode(5.0),
        }
    }
}

impl TimestepConfig {
    pub fn get(&self, task: TaskKind) -> TimestepParams {
        match task {
            TaskKind::T2I => self.t2i,
            TaskKind::T2V => self.t2v,
            TaskKind::I2I => self.i2i,
            TaskKind::I2V => self.i2v,
            TaskKind::V2V => self.v2v,
            TaskKind::IV2V => self.iv2v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in TaskKind::ALL {
            let p = self.get(t);
            if p.shift.is_nan() || p.shift < 1.0 {
                return Err(Error::Config(format!("shift for {t} must be >= 1")));
            }
            let s = match p.weighting {
                Weighting::LogitNormal { s, .. } | Weighting::Mode { s } => s,
            };
            if s.is_nan() || s <= 0.0 {
                return Err(Error::Config(format!("weighting scale for {t} must be positive")));
            }
        }
        Ok(())
    }
}

/// Gamma(shape, 1) by Marsaglia-Tsang rejection; shapes below one use the
/// `U^(1/a)` boost.
pub fn sample_gamma(rng: &mut Rng, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = sample_gamma(rng, shape + 1.0);
        let u = rng.uniform();
        return g * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn sample_beta(rng: &mut Rng, p: BetaParams) -> f64 {
    let a = sample_gamma(rng, p.alpha);
    let b = sample_gamma(rng, p.beta);
    let r = a / (a + b);
    if r.is_finite() {
        r.clamp(0.0, 1.0)
    } else {
        // Both gammas underflowed; only possible for tiny shapes.
        if p.alpha >= p.beta {
            1.0
        } else {
            0.0
        }
    }
}

pub fn sample_mask_ratio(cfg: &MaskRatioConfig, task: TaskKind, rng: &mut Rng) -> f64 {
    sample_beta(rng, cfg.get(task))
}

/// Fraction of target tokens still masked after inference step `k` of `total`.
pub fn inference_mask_ratio<S: Scalar>(k: usize, total: usize) -> Result<S> {
    if total == 0 || k >= total {
        return Err(Error::Contract(format!(
            "mask schedule step {k} out of range for {total} steps"
        )));
    }
    if k + 1 == total {
        return Ok(S::zero());
    }
    let x = S::FRAC_PI_2() * S::of((k + 1) as f64) / S::of(total as f64);
    Ok(x.cos())
}

/// Number of masked tokens (out of `m`) after each step; round half up.
pub fn masked_count_trace(total: usize, m: usize) -> Result<Vec<usize>> {
    (0..total)
        .map(|k| {
            let r: f64 = inference_mask_ratio(k, total)?;
            Ok(crate::sequence::mask_count(r, m))
        })
        .collect()
}

pub fn logit<S: Scalar>(t: S) -> S {
    (t / (S::one() - t)).ln()
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Logit-normal density on `(0, 1)`.
pub fn timestep_density_logit_normal<S: Scalar>(t: S, m: S, s: S) -> Result<S> {
    if !(t > S::zero() && t < S::one()) {
        return Err(Error::Domain(format!("logit-normal density needs t in (0,1), got {t}")));
    }
    if s.is_nan() || s <= S::zero() {
        return Err(Error::Domain(format!("logit-normal scale must be positive, got {s}")));
    }
    let two = S::of(2.0);
    let z = logit(t) - m;
    let norm = S::one() / (s * (two * S::PI()).sqrt());
    Ok(norm / (t * (S::one() - t)) * (-(z * z) / (two * s * s)).exp())
}

/// Mode-weighting map from a uniform draw `u` to a noise level.
pub fn timestep_map_mode<S: Scalar>(u: S, s: S) -> S {
    // cos^2(pi u / 2) in half-angle form, which is exact at u = 0, 1/2, 1.
    let c2 = (S::one() + (S::PI() * u).cos()) / S::of(2.0);
    S::one() - u - s * (c2 - S::one() + u)
}

/// Resolution shift `shift * x / (1 + (shift - 1) * x)`.
pub fn apply_shift<S: Scalar>(x: S, shift: S) -> S {
    shift * x / (S::one() + (shift - S::one()) * x)
}

/// Linearly decaying share of pair data.
pub fn pair_decay_weight(step: usize, total_steps: usize, start_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    start_fraction * (1.0 - step as f64 / total_steps as f64).max(0.0)
}

/// Draws an unshifted noise level from a weighting density.
pub fn sample_noise_level(w: Weighting, rng: &mut Rng) -> f64 {
    match w {
        Weighting::LogitNormal { m, s } => sigmoid(m + s * rng.normal()),
        Weighting::Mode { s } => timestep_map_mode(rng.uniform(), s).clamp(0.0, 1.0),
    }
}

/// Training time `t` (0 = noise, 1 = data) for a task: noise level drawn from
/// the task's weighting, shifted toward the noisy end, then converted.
pub fn sample_timestep(p: TimestepParams, rng: &mut Rng) -> f64 {
    let sigma = apply_shift(sample_noise_level(p.weighting, rng), p.shift);
    1.0 - sigma
}

/// Euler time grid `t_0 = 0 < ... < t_n = 1`, uniform in shifted noise level.
pub fn inference_time_grid(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Contract("integration needs at least one step".into()));
    }
    Ok((0..=steps)
        .map(|k| {
            let sigma = 1.0 - k as f64 / steps as f64;
            1.0 - apply_shift(sigma, shift)
        })
        .collect())
}
