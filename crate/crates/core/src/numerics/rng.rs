//! Explicit, replayable noise streams.
//!
//! Every stochastic operation takes a [`NoiseStream`]. Streams are derived
//! from a [`StreamKey`] by mixing in labels (purpose, iteration, sample
//! index), so any draw can be reproduced from its key alone and a resumed
//! run needs nothing more than the iteration counter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(splitmix64(seed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Child key for an integer label.
    pub fn derive(self, label: u64) -> Self {
        StreamKey(splitmix64(
            self.0 ^ splitmix64(label.wrapping_add(0x632B_E59B_D9B4_E019)),
        ))
    }

    /// Child key for a textual label (FNV-1a folded into the key).
    pub fn derive_str(self, label: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.derive(h)
    }

    pub fn stream(self) -> NoiseStream {
        NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(self.0),
        }
    }
}

/// A seeded generator. Not `Clone` on purpose: two owners of one stream would
/// silently share draws.
#[derive(Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn from_seed(seed: u64) -> Self {
        StreamKey::new(seed).stream()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty integer range {lo}..={hi}");
        self.rng.random_range(lo..=hi)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "cannot draw an index from an empty range");
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }
}
