//! Deterministic per-purpose RNG streams.
//!
//! Every random draw in the toolkit comes from a ChaCha8 stream derived
//! from (root seed, purpose tag, index) via SHA-256, so independent
//! subsystems and parallel workers never share or perturb each other's
//! streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, "init", 0), derive_seed(7, "init", 0));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(7, "init", 1));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(7, "step", 0));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(8, "init", 0));
    }
}
