//! Seeded RNG streams.
//!
//! Every random decision in the pipeline draws from a named stream so
//! that runs are reproducible and independent concerns (data order,
//! mix-up, parameter init) do not perturb each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child RNG from a master seed and a stream label.
pub fn stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child RNG for an indexed item within a stream
/// (e.g. one per generated image), so items can be produced in any
/// order or in parallel with identical results.
pub fn indexed_stream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(master_seed, &format!("{label}/{index}"))
}

/// Hash raw little-endian f64 bytes of a parameter block; used by the
/// freezing invariants to detect any drift.
pub fn hash_f64s(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}
