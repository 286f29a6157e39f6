//! Seed derivation.
//!
//! Every random stream in the engine is keyed by `(global seed, label, round)`
//! so results never depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"currl/sample-seed/v1";

/// Mix a global seed, a sample id and a round index into a 64-bit seed.
///
/// SHA-256 over a domain tag, the little-endian seed and round, and the id
/// bytes; the first eight digest bytes are read little-endian.
pub fn derive_sample_seed(global_seed: u64, sample_id: &str, round: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN);
    hasher.update(global_seed.to_le_bytes());
    hasher.update(round.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Convenience: a ChaCha8 generator seeded from [`derive_sample_seed`].
pub fn stream(global_seed: u64, label: &str, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_sample_seed(global_seed, label, round))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(derive_sample_seed(7, "q1", 0), derive_sample_seed(7, "q1", 0));
    }

    #[test]
    fn distinct_inputs_give_distinct_seeds() {
        let base = derive_sample_seed(7, "q1", 0);
        assert_ne!(base, derive_sample_seed(7, "q2", 0));
        assert_ne!(base, derive_sample_seed(8, "q1", 0));
        assert_ne!(base, derive_sample_seed(7, "q1", 1));
    }

    #[test]
    fn id_and_round_do_not_alias() {
        // the round is fixed-width so "a" + round 1 cannot collide with a
        // differently split id
        assert_ne!(derive_sample_seed(0, "a1", 0), derive_sample_seed(0, "a", 1));
    }

    #[test]
    fn golden_value() {
        assert_eq!(derive_sample_seed(0, "a", 0), GOLDEN_ZERO_A_ZERO);
    }

    // derive_sample_seed(0, "a", 0), cross-checked with an independent
    // hashlib computation.
    const GOLDEN_ZERO_A_ZERO: u64 = 16_613_835_119_826_391_312;
}
