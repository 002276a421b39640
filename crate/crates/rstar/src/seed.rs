//! Deterministic seed derivation.
//!
//! Every random draw in a run descends from a single 64-bit run seed through
//! explicit mixing, never from arrival order or wall-clock state, so reruns
//! with the same seed reproduce byte-identical behaviour.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over raw bytes. Stable across platforms and compiler versions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0u64;
    for &p in parts {
        h = mix64(h ^ mix64(p));
    }
    h
}

/// Seeded ChaCha8 stream; the only RNG construction used anywhere.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn fnv1a_known_values() {
        // Reference values for the 64-bit FNV-1a parameters.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 9]), derive_seed(&[7, 9]));
    }

    #[test]
    fn seeded_rng_reproduces() {
        let a: u64 = seeded_rng(42).gen();
        let b: u64 = seeded_rng(42).gen();
        let c: u64 = seeded_rng(43).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
