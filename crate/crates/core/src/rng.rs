//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent generator for `name` under `root`.
///
/// The stream is keyed by SHA-256 of the root seed and the name, so adding a new
/// consumer never shifts the draws of an existing one.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// A derived 64-bit seed, for APIs that take plain integers.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(root, name).next_u64()
}
