//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Returns the deterministic generator for `name` under `root_seed`.
///
/// Distinct names give independent streams; the mapping is stable across
/// platforms and releases because it goes through SHA-256.
pub fn substream(root_seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit seed for `name` under `root_seed`.
pub fn derive_seed(root_seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| substream(7, "counter").random()).collect();
        let mut r1 = substream(7, "counter");
        let mut r2 = substream(7, "counter");
        let mut r3 = substream(7, "vae");
        let x: u64 = r1.random();
        assert_eq!(x, r2.random::<u64>());
        assert_ne!(x, r3.random::<u64>());
        assert_eq!(a[0], a[1]);
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
