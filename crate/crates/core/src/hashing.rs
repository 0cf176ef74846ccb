//! Content fingerprints for datasets, checkpoints and reports.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 16 hex chars of the SHA-256 digest; enough to key caches and reports.
pub fn short_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}

/// Full SHA-256 of a file's contents.
pub fn hash_file(path: &std::path::Path) -> crate::Result<String> {
    if !path.exists() {
        return Err(crate::Error::MissingFile(path.to_path_buf()));
    }
    Ok(sha256_hex(&std::fs::read(path)?))
}
