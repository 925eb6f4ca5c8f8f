//! Deterministic randomness plumbing.
//!
//! Every random quantity in the crate descends from a seed through a labeled
//! ChaCha8 stream, so any component (server, auditor, noise, weights) can be
//! replayed in isolation. Labels are length-prefixed before hashing, which
//! keeps distinct `(seed, label)` pairs from colliding.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"ldd-audit/v1";

/// 32-byte stream key for a `(seed, label)` pair.
pub fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Labeled counter-mode stream for a `u64` seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, label))
}

/// Labeled stream keyed by raw bytes (used with the per-request seed `r`).
pub fn stream_from_bytes(key: &[u8], label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update((key.len() as u64).to_le_bytes());
    h.update(key);
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Per-step sampling tag `r_i`, expanded from the single committed request
/// seed. The server records it in the trace; the verifier recomputes it from
/// `seed_r` and the step index.
pub fn step_rand_tag(seed_r: &[u8; 32], step_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ldd-audit/step");
    h.update(seed_r);
    h.update(u64::from(step_index).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform draw in `[0, 1)` from the high 53 bits of a tag.
pub fn unit_from_tag(tag: u64) -> f64 {
    (tag >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
