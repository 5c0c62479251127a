//! Content digests used to bind checkpoints and fingerprint datasets.

use sha2::{Digest, Sha256};

/// SHA-256 of a byte slice.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

/// Lowercase hex rendering of a digest.
pub fn hex(digest: &[u8]) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::with_capacity(digest.len() * 2);
    for b in digest {
        let _ = write!(s, "{:02x}", b);
    }
    s
}
