//! Seed derivation and RNG streams.
//!
//! Every stochastic operation in the pipeline draws from a `ChaCha8Rng`
//! seeded through [`derive_seed`], so a single root seed reproduces an entire
//! experiment. The derivation tree is flat: `derive_seed(root, domain, idx)`
//! hashes the root, a domain tag naming the consumer, and the consumer's
//! indices (template id, class id, epoch, ...). Distinct domains or indices
//! give independent streams; identical inputs give identical streams on every
//! platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a root seed, a domain tag, and indices.
pub fn derive_seed(root: u64, domain: &str, idx: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([domain.len() as u8]);
    hasher.update(domain.as_bytes());
    for i in idx {
        hasher.update(i.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A deterministic RNG stream for the given seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for a derived stream.
pub fn derived_stream(root: u64, domain: &str, idx: &[u64]) -> ChaCha8Rng {
    stream(derive_seed(root, domain, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_deterministic_and_separating() {
        let a = derive_seed(7, "print", &[1, 2]);
        let b = derive_seed(7, "print", &[1, 2]);
        let c = derive_seed(7, "print", &[2, 1]);
        let d = derive_seed(7, "template", &[1, 2]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_reproduce() {
        let x: u64 = stream(42).gen();
        let y: u64 = stream(42).gen();
        assert_eq!(x, y);
    }
}
