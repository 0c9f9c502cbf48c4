//! Seed derivation for reproducible, decomposable randomness.
//!
//! Every stochastic component (init, dropout, shuffling, augmentation,
//! synthetic generation) draws from a ChaCha8 stream seeded through
//! [`derive_seed`], so per-item and per-epoch streams are independent of
//! iteration order and stable across runs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable by construction.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of context labels
/// (epoch index, item index, component tag, ...).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = mix(base);
    for &p in path {
        state = mix(state ^ mix(p));
    }
    state
}

/// ChaCha8 generator for a derived seed path.
pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_path_sensitive() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
    }

    #[test]
    fn rngs_from_equal_paths_agree() {
        let mut a = rng_for(7, &[1, 4]);
        let mut b = rng_for(7, &[1, 4]);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
