use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{numel, Real, Tensor};

/// Seeded random stream. Identical seed and call sequence give an identical
/// stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finaliser, used to derive independent child seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `stream`: seeded with `splitmix64(seed ^ splitmix64(stream))`.
    /// Does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// `k` distinct indices from `0..n`, uniformly without replacement.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        use rand::seq::SliceRandom;
        xs.shuffle(&mut self.inner);
    }

    pub fn gaussian<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::of(self.normal()))
    }

    pub fn normal_scaled<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::of(self.normal() * std))
    }
}

/// I.i.d. standard normal samples of the given shape.
pub fn gaussian<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    debug_assert!(numel(shape) > 0);
    rng.gaussian(shape)
}
