use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Counter-based random stream.
///
/// A stream is identified by `(seed, stream)` and positioned by a word
/// counter, so any consumer can be rewound or resumed exactly. Derived
/// streams ([`Rng::fork`]) are independent of the parent's position.
#[derive(Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub counter: u128,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Independent child stream named by `label`.
    pub fn fork(&self, label: u64) -> Self {
        Self::with_stream(splitmix(self.seed ^ splitmix(self.stream)), label)
    }

    /// Child stream named by a path of labels, e.g. `[stage, step, item]`.
    pub fn fork_path(&self, labels: &[u64]) -> Self {
        labels.iter().fold(self.clone(), |r, &l| r.fork(l))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            counter: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.counter);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes two uniforms, returns one draw.
    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let a = std::f64::consts::TAU * u2;
        (r * a.cos(), r * a.sin())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn range_i64(&mut self, lo: i64, hi_inclusive: i64) -> i64 {
        lo + self.below((hi_inclusive - lo + 1) as usize) as i64
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_tensor<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::of(self.uniform()))
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let (a, b) = self.normal_pair();
            data.push(S::of(a));
            if data.len() < n {
                data.push(S::of(b));
            }
        }
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// `shape`-sized standard normal draws.
pub fn sample_normal<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    rng.normal_tensor(shape)
}

/// `shape`-sized uniform `[0, 1)` draws.
pub fn sample_uniform<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    rng.uniform_tensor(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Tensor<f64> = sample_normal(&mut Rng::new(7), &[3, 5]);
        let b: Tensor<f64> = sample_normal(&mut Rng::new(7), &[3, 5]);
        assert_eq!(a.data(), b.data());
        let c: Tensor<f64> = sample_normal(&mut Rng::new(8), &[3, 5]);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut r = Rng::new(3).fork(9);
        for _ in 0..17 {
            r.next_u64();
        }
        let saved = r.state();
        let expect: Vec<u64> = (0..5).map(|_| r.next_u64()).collect();
        let mut resumed = Rng::from_state(saved);
        let got: Vec<u64> = (0..5).map(|_| resumed.next_u64()).collect();
        assert_eq!(expect, got);
    }

    #[test]
    fn forks_do_not_depend_on_parent_position() {
        let mut parent = Rng::new(5);
        let before = parent.fork(1).next_u64();
        parent.next_u64();
        assert_eq!(before, parent.fork(1).next_u64());
        assert_ne!(parent.fork(1).next_u64(), parent.fork(2).next_u64());
    }

    #[test]
    fn normal_moments() {
        let x: Tensor<f64> = sample_normal(&mut Rng::new(1), &[100_000]);
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.numel() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_cdf_sup_distance() {
        let x: Tensor<f64> = sample_uniform(&mut Rng::new(2), &[100_000]);
        let mut v = x.into_data();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let d = v
            .iter()
            .enumerate()
            .map(|(i, &u)| ((i + 1) as f64 / n - u).abs().max((u - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(d < 0.01, "sup distance {d}");
    }
}
