//! Deterministic random-stream derivation.
//!
//! Every stochastic component (data generation, network initialization, batch
//! shuffling) draws from its own ChaCha8 stream whose 32-byte key is
//! `SHA-256(seed_le_bytes || label || index_le_bytes)`. Streams are therefore
//! reproducible across platforms, independent of each other, and insensitive
//! to the order in which unrelated components consume randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives the ChaCha8 stream for `(seed, label, index)`.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}
