use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::schedules::{pair_decay_weight, TaskKind};

/// One data source of a stage mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MixtureEntry {
    Task(TaskKind),
    /// Mined similar-clip pairs used as V2V.
    VideoPair,
    /// Mined similar-frame pairs used as I2I.
    ImagePair,
    /// Instruction text only (next-token loss).
    Text,
}

impl MixtureEntry {
    pub fn is_pair(self) -> bool {
        matches!(self, Self::VideoPair | Self::ImagePair)
    }

    /// Task the entry is trained as; `None` for text-only.
    pub fn task(self) -> Option<TaskKind> {
        match self {
            Self::Task(t) => Some(t),
            Self::VideoPair => Some(TaskKind::V2V),
            Self::ImagePair => Some(TaskKind::I2I),
            Self::Text => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Task(t) => t.name(),
            Self::VideoPair => "video_pair",
            Self::ImagePair => "image_pair",
            Self::Text => "text",
        }
    }
}

impl fmt::Display for MixtureEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixtureEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video_pair" => Ok(Self::VideoPair),
            "image_pair" => Ok(Self::ImagePair),
            "text" => Ok(Self::Text),
            _ => s.parse().map(Self::Task),
        }
    }
}

/// Normalized mixture weights over entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    entries: Vec<(MixtureEntry, f64)>,
}

impl Mixture {
    /// Parses and normalizes a name→weight table.
    pub fn from_weights(weights: &BTreeMap<String, f64>) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, &w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("mixture weight `{k}` = {w} must be finite and nonnegative")));
            }
            if w > 0.0 {
                entries.push((k.parse::<MixtureEntry>()?, w));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if total <= 0.0 {
            return Err(Error::Config("mixture has no positive weight".into()));
        }
        entries.sort_by_key(|e| e.0);
        for e in &mut entries {
            e.1 /= total;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(MixtureEntry, f64)] {
        &self.entries
    }

    pub fn pair_fraction(&self) -> f64 {
        self.entries.iter().filter(|e| e.0.is_pair()).map(|e| e.1).sum()
    }

    /// Probabilities at `step` of `total` with the pair share decayed
    /// linearly to zero and the remainder rescaled proportionally.
    pub fn probabilities_at(&self, step: usize, total: usize) -> Vec<(MixtureEntry, f64)> {
        let p0 = self.pair_fraction();
        if p0 == 0.0 || p0 == 1.0 {
            return self.entries.clone();
        }
        let p = pair_decay_weight(step, total, p0);
        self.entries
            .iter()
            .map(|&(e, w)| (e, if e.is_pair() { w * p / p0 } else { w * (1.0 - p) / (1.0 - p0) }))
            .collect()
    }

    pub fn sample_at(&self, step: usize, total: usize, rng: &mut Rng) -> MixtureEntry {
        sample(&self.probabilities_at(step, total), rng)
    }

    pub fn sample(&self, rng: &mut Rng) -> MixtureEntry {
        sample(&self.entries, rng)
    }
}

fn sample(probs: &[(MixtureEntry, f64)], rng: &mut Rng) -> MixtureEntry {
    let u = rng.uniform();
    let mut acc = 0.0;
    for &(e, p) in probs {
        acc += p;
        if u < acc {
            return e;
        }
    }
    probs.iter().rev().find(|e| e.1 > 0.0).expect("non-empty mixture").0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn empirical_frequencies_match_weights() {
        let m = Mixture::from_weights(&weights(&[("t2i", 13.0), ("t2v", 19.0), ("v2v", 1.0), ("text", 62.0)])).unwrap();
        let mut rng = Rng::new(3);
        let mut counts = BTreeMap::new();
        let n = 100_000;
        for _ in 0..n {
            *counts.entry(m.sample(&mut rng)).or_insert(0usize) += 1;
        }
        for &(e, p) in m.entries() {
            let f = counts.get(&e).copied().unwrap_or(0) as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "{e}: {f} vs {p}");
        }
    }

    #[test]
    fn pair_share_decays_to_zero() {
        let m = Mixture::from_weights(&weights(&[("t2v", 42.0), ("video_pair", 11.0), ("image_pair", 11.0)])).unwrap();
        let p0 = m.pair_fraction();
        for step in [0, 25, 50, 99, 100] {
            let probs = m.probabilities_at(step, 100);
            let pair: f64 = probs.iter().filter(|e| e.0.is_pair()).map(|e| e.1).sum();
            assert!((pair - pair_decay_weight(step, 100, p0)).abs() < 1e-12);
            assert!((probs.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(Mixture::from_weights(&weights(&[("t2v", -1.0)])).is_err());
        assert!(Mixture::from_weights(&weights(&[("t2v", 0.0)])).is_err());
        assert!(Mixture::from_weights(&weights(&[("x2y", 1.0)])).is_err());
    }
}
