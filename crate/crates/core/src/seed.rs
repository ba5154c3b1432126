//! Named, derived random streams.
//!
//! All randomness in a run flows from one global seed. Sub-streams are keyed
//! by a label (and usually an example id), so the stream a worker sees does
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 64-bit seed from a global seed and a list of labels.
pub fn derive_seed(global: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(global: u64, labels: &[&str]) -> Rng {
    Rng::seed_from_u64(derive_seed(global, labels))
}
