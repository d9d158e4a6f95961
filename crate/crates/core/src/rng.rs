//! Deterministic, splittable random streams.
//!
//! A [`SeededRng`] is a ChaCha8 keystream addressed by `(seed, stream)`.
//! Child streams are keyed from the parent's address and an index, so work
//! items can draw randomness without depending on scheduling order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids reserved for pipeline stages sharing one global seed.
pub mod streams {
    pub const AUGMENT: u64 = 0x6175_676d;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const PACK: u64 = 0x7061_636b;
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const HEAD: u64 = 0x6865_6164;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream keyed by this stream's address and `index`; independent
    /// of how much has been drawn from `self`.
    pub fn child(&self, index: u64) -> Self {
        let key = splitmix64(self.seed ^ splitmix64(self.stream ^ 0xa076_1d64_78bd_642f));
        Self::new(key, index)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi]`; returns `lo` exactly when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.unit();
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * u
        }
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for SeededRng {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_sequence() {
        let mut a = SeededRng::new(42, 7);
        let mut b = SeededRng::new(42, 7);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_differ() {
        let mut a = SeededRng::new(42, 7);
        let mut b = SeededRng::new(42, 8);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn child_ignores_parent_position() {
        let parent = SeededRng::new(1, 2);
        let mut advanced = parent.clone();
        for _ in 0..100 {
            advanced.next_u32();
        }
        let mut c1 = parent.child(5);
        let mut c2 = advanced.child(5);
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut c3 = parent.child(6);
        assert_ne!(parent.child(5).next_u64(), c3.next_u64());
    }

    #[test]
    fn pinned_values() {
        // ChaCha8 output is fully specified; pin the first draws so any
        // change in key derivation is caught.
        assert_eq!(SeededRng::new(0, 0).next_u64(), 0xb585_f767_a79a_3b6c);
        assert_eq!(SeededRng::new(0, 0).child(0).next_u64(), 0x2163_f4df_9038_ee75);
    }

    #[test]
    fn uniform_degenerate_range() {
        let mut r = SeededRng::new(3, 3);
        assert_eq!(r.uniform(1.25, 1.25), 1.25);
        for _ in 0..100 {
            let v = r.uniform(-2.0, 3.0);
            assert!((-2.0..=3.0).contains(&v));
        }
    }
}
