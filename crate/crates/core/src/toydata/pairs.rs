use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

use super::scene::ToyScene;
use super::{color_features, CHANNELS};

/// Inclusive similarity band for a retained pair.
pub const SIMILARITY_BAND: (f64, f64) = (0.65, 0.95);
pub const MAX_PAIRS_PER_ORIGIN: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub origin: usize,
    pub partner: usize,
    pub clip_a: ToyScene,
    pub clip_b: ToyScene,
    pub similarity: f64,
}

fn mean_frame(scene: &ToyScene) -> Vec<f64> {
    let g = scene.grid;
    let feats = color_features(&scene.frames());
    let per_frame = g.h * g.w * CHANNELS;
    let mut out = vec![0.0; per_frame];
    for f in feats.chunks(per_frame) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= g.t as f64);
    out
}

/// Normalized cross-correlation of the time-averaged frames, clamped at 0.
/// Clips with no spatial variation score 0 against everything.
pub fn similarity(a: &ToyScene, b: &ToyScene) -> f64 {
    let (x, y) = (mean_frame(a), mean_frame(b));
    if x.len() != y.len() {
        return 0.0;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(0.0, 1.0)
}

/// Pairs every clip with every other clip, keeps those inside the band and
/// caps each origin at [`MAX_PAIRS_PER_ORIGIN`] (a seeded random subset).
pub fn mine_pairs(pool: &[ToyScene], rng: &mut Rng) -> Vec<PairRecord> {
    let mut out = Vec::new();
    for (i, a) in pool.iter().enumerate() {
        let mut kept: Vec<(usize, f64)> = pool
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, b)| (j, similarity(a, b)))
            .filter(|&(_, s)| (SIMILARITY_BAND.0..=SIMILARITY_BAND.1).contains(&s))
            .collect();
        if kept.len() > MAX_PAIRS_PER_ORIGIN {
            rng.shuffle(&mut kept);
            kept.truncate(MAX_PAIRS_PER_ORIGIN);
            kept.sort_by_key(|&(j, _)| j);
        }
        out.extend(kept.into_iter().map(|(j, s)| PairRecord {
            origin: i,
            partner: j,
            clip_a: a.clone(),
            clip_b: pool[j].clone(),
            similarity: s,
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::Grid3;
    use crate::toydata::scene::{gen_scene, place_object, Placement};

    const G: Grid3 = Grid3::new(2, 8, 8);

    #[test]
    fn identical_clips_are_dropped() {
        let s = gen_scene(&mut Rng::new(1), G, 3).unwrap();
        assert!((similarity(&s, &s) - 1.0).abs() < 1e-12);
        assert!(mine_pairs(&[s.clone(), s], &mut Rng::new(0)).is_empty());
    }

    #[test]
    fn independent_clips_are_mostly_dropped() {
        let mut rng = Rng::new(2);
        let pool: Vec<_> = (0..60).map(|_| gen_scene(&mut rng, G, 2).unwrap()).collect();
        let mut total = 0.0;
        for i in 0..30 {
            total += similarity(&pool[2 * i], &pool[2 * i + 1]);
        }
        assert!(total / 30.0 < 0.2, "{}", total / 30.0);
        let pairs = mine_pairs(&pool, &mut Rng::new(3));
        assert!(pairs.len() < 60 * 59 / 20);
    }

    #[test]
    fn origin_cap_is_enforced() {
        let mut rng = Rng::new(4);
        let base = gen_scene(&mut rng, G, 4).unwrap();
        let mut pool = vec![base.clone()];
        while pool.len() < 151 {
            let mut v = base.clone();
            let free = v.free_colors();
            let color = free[rng.below(free.len())];
            if let Some(o) = place_object(&mut rng, &v, color, None, Placement::Free) {
                v.objects.push(o);
                let s = similarity(&base, &v);
                if (SIMILARITY_BAND.0..=SIMILARITY_BAND.1).contains(&s) {
                    pool.push(v);
                }
            }
        }
        let pairs = mine_pairs(&pool, &mut Rng::new(5));
        assert_eq!(pairs.iter().filter(|p| p.origin == 0).count(), MAX_PAIRS_PER_ORIGIN);
        for p in &pairs {
            assert!((SIMILARITY_BAND.0..=SIMILARITY_BAND.1).contains(&p.similarity));
            assert!(pairs.iter().filter(|q| q.origin == p.origin).count() <= MAX_PAIRS_PER_ORIGIN);
        }
    }
}
