//! Seeded sub-stream derivation.
//!
//! All randomness in the pipeline flows from a single user seed. Each
//! consumer derives its own named stream so that runs differing in one
//! factor (clustering seed, expert index, ...) keep every other stream
//! untouched.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `(seed, label)`.
///
/// Labels in use: `corpus`, `backbone-init`, `pretrain-order`,
/// `pool-init/<k>`, `kmeans`, `random-assign`, `expert-order/<k>`,
/// `fraction-sample`, `icl-exemplars`.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b":");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
