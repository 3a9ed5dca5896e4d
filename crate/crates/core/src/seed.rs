//! Deterministic random streams derived from one master seed.
//!
//! Every stream is keyed by a stable string id, so adding a sensor or a
//! stage never shifts the numbers drawn by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// 64-bit sub-seed for the stream `id`.
pub fn derive_seed(master: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, id: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, id))
}
