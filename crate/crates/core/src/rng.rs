//! Seeded random streams.
//!
//! Every stochastic step (negative sampling, split shuffling, batch order,
//! random rankings, synthetic data) draws from `ChaCha8Rng`, a counter-based
//! stream cipher generator. Independent streams are derived from a root seed
//! and a list of labels with [`derive_seed`]:
//!
//! ```text
//! seed = u64_le(SHA-256(u64_le(root) || for each label: u64_le(len) || utf8(label))[0..8])
//! ```
//!
//! so any implementation that follows the recipe reproduces the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Builds a generator from a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from `root` and an ordered list of labels.
pub fn derive_seed(root: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
