//! Seeded randomness. Every stochastic step in the crate draws from a
//! `ChaCha8Rng` created here, so one master seed fixes an entire experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG from a bare seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-seed from a master seed and a purpose label.
///
/// FNV-1a over `(seed LE bytes || purpose)`. The hash is fixed by this crate,
/// not borrowed from the standard library, so derived streams never shift
/// between releases; adding a new purpose never perturbs existing ones.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in master.to_le_bytes().iter().chain(purpose.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// RNG for a derived purpose, e.g. `purpose_rng(seed, "pgd/start/17")`.
pub fn purpose_rng(master: u64, purpose: &str) -> ChaCha8Rng {
    seeded_rng(derive_seed(master, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let a: f64 = seeded_rng(7).random();
        let b: f64 = seeded_rng(7).random();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        let a = derive_seed(42, "classifier/init");
        let b = derive_seed(42, "autoencoder/init");
        let c = derive_seed(43, "classifier/init");
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derive_is_stable() {
        // Frozen so a refactor cannot silently reshuffle experiments.
        assert_eq!(derive_seed(0, "classifier/init"), 0xd1ac_4054_bbd3_039f);
        assert_eq!(derive_seed(42, "train"), 0x16de_21a0_cc37_7817);
    }
}
