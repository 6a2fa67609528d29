//! Deterministic random streams with tree-structured derivation.
//!
//! Every randomized stage of the pipeline draws from a [`SeedStream`].
//! A stream is addressed, not shared: `derive(tag)` produces an independent
//! child stream from the parent's base seed and the tag alone, so parallel
//! workers (per batch item, per MC pass) get identical streams no matter
//! which thread runs them or in which order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A seeded random stream. Draws advance internal state; `derive` does not.
#[derive(Debug, Clone)]
pub struct SeedStream {
    base: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self { base: seed, rng: ChaCha8Rng::from_seed(key) }
    }

    /// Child stream addressed by `tag`. Independent of draws already made
    /// on `self`; the same (base, tag) pair always yields the same child.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(splitmix64(self.base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    /// Uniform in [0, 1).
    pub fn unit_f32(&mut self) -> f32 {
        self.rng.random()
    }

    /// Uniform in [0, 1).
    pub fn unit_f64(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal_f32(&mut self) -> f32 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Standard normal draw.
    pub fn normal_f64(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Bernoulli draw with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        self.unit_f64() < p
    }
}
