//! Deterministic seed derivation. Every random draw in the pipeline comes
//! from a ChaCha stream seeded through these helpers, so runs are
//! reproducible across platforms and resumable mid-stage.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed, a purpose tag and an index.
pub fn derive_seed(base: u64, tag: &str, k: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in tag.as_bytes() {
        h = splitmix64(h ^ *b as u64);
    }
    splitmix64(h ^ k)
}

/// ChaCha stream for a derived seed.
pub fn rng_for(base: u64, tag: &str, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, "scene", 3), derive_seed(7, "scene", 3));
        assert_ne!(derive_seed(7, "scene", 3), derive_seed(7, "scene", 4));
        assert_ne!(derive_seed(7, "scene", 3), derive_seed(7, "noise", 3));
        assert_ne!(derive_seed(7, "scene", 3), derive_seed(8, "scene", 3));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<u32> = (0..4).map(|_| rng_for(1, "t", 0).random()).collect();
        assert!(a.iter().all(|v| *v == a[0]));
    }
}
