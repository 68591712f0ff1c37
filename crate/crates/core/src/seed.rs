//! Deterministic seed derivation.
//!
//! One root seed feeds every randomized consumer (model init, calibration,
//! epoch shuffling); each gets an independent stream derived from a stable
//! domain tag, so paired runs can share or separate streams by construction.

use sha2::{Digest, Sha256};

/// Derives a child seed from `root` and a domain tag. Stable across
/// platforms and releases.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::derive_seed;

    #[test]
    fn deterministic_and_tag_sensitive() {
        assert_eq!(derive_seed(7, "calib"), derive_seed(7, "calib"));
        assert_ne!(derive_seed(7, "calib"), derive_seed(7, "eval"));
        assert_ne!(derive_seed(7, "calib"), derive_seed(8, "calib"));
    }
}
