//! Seeded, splittable random streams.
//!
//! Every consumer takes its own labeled substream, so adding a draw in one
//! place never shifts the numbers seen somewhere else.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `(this stream, label)`; does not advance `self`.
    pub fn substream(&self, label: &str) -> Rng {
        let h = fnv1a(fnv1a(FNV_OFFSET, &self.stream.to_le_bytes()), label.as_bytes());
        Self::with_stream(self.seed, h)
    }

    pub fn substream_indexed(&self, label: &str, index: u64) -> Rng {
        let h = fnv1a(
            fnv1a(fnv1a(FNV_OFFSET, &self.stream.to_le_bytes()), label.as_bytes()),
            &index.to_le_bytes(),
        );
        Self::with_stream(self.seed, h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..=max`.
    pub fn index_inclusive(&mut self, max: usize) -> usize {
        self.inner.random_range(0..=max)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// In-place Fisher-Yates (Durstenfeld) shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index_inclusive(i);
            items.swap(i, j);
        }
    }
}
