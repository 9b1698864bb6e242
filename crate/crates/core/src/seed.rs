//! Per-component seeds derived from one root seed.

use sha2::{Digest, Sha256};

/// First 8 bytes (little-endian) of `SHA-256(root.to_le_bytes() ‖ component)`.
pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub const INIT: &str = "init";
pub const ENCODER: &str = "encoder";
pub const SHUFFLE: &str = "shuffle";
pub const DROPOUT: &str = "dropout";
pub const AUGMENT: &str = "augment";
