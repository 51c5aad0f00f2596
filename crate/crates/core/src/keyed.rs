//! Counter-based randomness.
//!
//! Every random quantity that must not depend on evaluation order (scorer
//! noise, per-session draws) is derived from a hash of its key rather than
//! from a shared generator.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Domain tags keep independent uses of the same numeric key apart.
pub mod tag {
    pub const SESSION: u64 = 0x5e55_1011;
    pub const EMBED_USER: u64 = 0xe3b0_0001;
    pub const EMBED_ITEM: u64 = 0xe3b0_0002;
    pub const EMBED_BIAS: u64 = 0xe3b0_0003;
    pub const LOGIT_NOISE: u64 = 0x1091_7000;
    pub const REFRESH: u64 = 0x00ff_1e50;
    pub const REQUEST: u64 = 0x0a11_0e57;
}

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a key tuple.
#[inline]
pub fn key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |h, &p| mix(h ^ mix(p)))
}

/// Minimal SplitMix64 generator; cheap to seed per draw.
#[derive(Clone, Debug)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Standard normal draw that is a pure function of `key`.
#[inline]
pub fn normal(key: u64) -> f64 {
    StandardNormal.sample(&mut SplitMix64::new(key))
}

/// A full-strength generator for a keyed stream of draws.
pub fn stream(key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key)
}
