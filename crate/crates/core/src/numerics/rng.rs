use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded counter-based random stream.
///
/// A stream is addressed by `(seed, stream id)`; independent stochastic sites
/// take distinct stream ids so their draws never depend on evaluation order.
#[derive(Clone, Debug)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream(rng)
    }

    /// Stream for `(domain, index)`, e.g. one per rendered utterance.
    pub fn derive(seed: u64, domain: Domain, index: u64) -> Self {
        Self::new(seed, ((domain as u64) << 48) ^ index)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's widening multiply; bias is negligible for our n.
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
}

/// Stream namespaces.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Speaker = 2,
    Dialect = 3,
    Render = 4,
    Corpus = 5,
    Batch = 6,
    Noise = 7,
    Crop = 8,
    Sample = 9,
    Probe = 10,
    Cluster = 11,
    Projection = 12,
    GradCheck = 13,
    Misc = 14,
    Token = 15,
}
