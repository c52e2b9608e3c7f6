//! Seeded randomness.
//!
//! Every random draw in the crate comes from SplitMix64 (Steele, Lea & Flood),
//! whose state advances by the golden-ratio increment `0x9E3779B97F4A7C15` and
//! is finalized with multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`
//! (shifts 30, 27, 31). The generator is seeded directly with the 64-bit
//! seed. Sub-streams (one per scene, trial, ...) are derived by XOR-ing the
//! base seed with the stream index.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Seed of sub-stream `index`: `base ⊕ index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

/// FNV-1a hash of a string, used to derive per-scene streams from scene ids.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Uniform draw in `[lo, hi)`; returns `lo` when the range is empty.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    lo + (hi - lo) * rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 0 from the reference C implementation
        let mut r = seeded(0);
        assert_eq!(r.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(r.next_u64(), 0x6e789e6aa1b965f4);
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(seeded(42), |r, _: u64| Some(r.next_u64()))
            .collect();
        let b: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(seeded(42), |r, _: u64| Some(r.next_u64()))
            .collect();
        assert_eq!(a, b);
        assert_ne!(derive_seed(42, 1), derive_seed(42, 2));
        assert_eq!(stable_hash("abc"), stable_hash("abc"));
    }
}
