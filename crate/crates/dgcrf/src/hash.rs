use sha2::{Digest, Sha256};

/// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
