//! Labeled, counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 stream keyed by
//! `(seed, label, index)`, so independent consumers never share state and
//! results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(b"sif-stream-v1");
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(digest)
}

/// Derives a child seed, e.g. one per trigger or per mutation.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, label, index).next_u64()
}
