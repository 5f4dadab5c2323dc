use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Vector;

/// Seeded, splittable random stream.
///
/// Draws are a pure function of `(seed, stream_id)` and the call sequence:
/// ChaCha8 is counter based, so a stream rebuilt with the same pair replays
/// bit-identical values on any platform. [`RngStream::substream`] derives
/// statistically independent children, which lets per-datum work own private
/// streams without coordination.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream_id: u64,
}

/// SplitMix64 finalizer; bijective on u64, scrambles related ids apart.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            rng,
            seed,
            stream_id,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives the `id`-th child stream. Children with distinct ids, and the
    /// parent itself, never share counter state.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(id)))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `n` independent draws from N(0, 1).
    pub fn sample_std_normal(&mut self, n: usize) -> Vector {
        assert!(n >= 1, "sample_std_normal requires n >= 1");
        Vector::from_fn(n, |_, _| self.standard_normal())
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer from `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n >= 1, "below requires n >= 1");
        self.rng.gen_range(0..n)
    }

    /// Index draw from an unnormalized weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        debug_assert!(weights.iter().all(|w| *w >= 0.0));
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (j, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return j;
            }
        }
        weights.len() - 1
    }
}
