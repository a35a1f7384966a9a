//! Seed derivation and per-instance random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent stream for item `index` under `seed`.
///
/// Streams are keyed by index, so the draws for one instance never depend on
/// how many other instances exist or in which order they are processed.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic sub-seed for a named pipeline stage.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |seed, index| {
            let mut rng = stream(seed, index);
            (0..4).map(|_| rng.random::<u64>()).collect::<Vec<_>>()
        };
        let a = draw(7, 3);
        let b = draw(7, 3);
        let c = draw(7, 4)[0];
        assert_eq!(a, b);
        assert_ne!(a[0], c);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_eq!(derive_seed(1, "data"), derive_seed(1, "data"));
        assert_ne!(derive_seed(1, "data"), derive_seed(1, "noise"));
        assert_ne!(derive_seed(1, "data"), derive_seed(2, "data"));
    }
}
