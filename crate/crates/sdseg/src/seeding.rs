//! Deterministic rng derivation.
//!
//! Every random stream in the crate is keyed off one global seed plus a tag
//! path (and optionally an index), so samples can be generated in any order,
//! serially or in parallel, with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Rng for a (seed, tag path) pair.
pub fn derive_rng(seed: u64, tags: &[&str]) -> ChaCha12Rng {
    derive_indexed_rng(seed, tags, 0)
}

/// Rng for a (seed, tag path, index) triple.
pub fn derive_indexed_rng(seed: u64, tags: &[&str], index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for tag in tags {
        hasher.update([0xff]);
        hasher.update(tag.as_bytes());
    }
    hasher.update([0xfe]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
