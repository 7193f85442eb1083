//! Seeded, platform-independent random streams.
//!
//! Every stochastic operation in the engine draws from an [`Rng`] derived from
//! the run seed plus a path of stream indices (for example `(seed, step,
//! sample)`). Derivation is a pure function of those integers, so results do
//! not depend on how work is scheduled across workers.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic generator: ChaCha8 keyed by a SplitMix64-expanded seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self {
            seed,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Seed of a child stream; depends only on `seed` and `stream`.
    pub fn split_seed(seed: u64, stream: u64) -> u64 {
        splitmix64(seed ^ splitmix64(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
    }

    /// Child generator for an index path, e.g. `derive(seed, &[step, sample])`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let s = path
            .iter()
            .fold(seed, |acc, &stream| Self::split_seed(acc, stream));
        Self::new(s)
    }

    /// Child generator of this generator's seed. Does not advance `self`.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(Self::split_seed(self.seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Shuffled `0..n` for one epoch of an index stream. Item `k` of the stream
/// is `epoch_permutation(seed, stream, k / n, n)[k % n]`.
pub fn epoch_permutation(seed: u64, stream: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut Rng::derive(seed, &[stream, epoch]));
    p
}
