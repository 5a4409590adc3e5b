//! Seeded random streams.
//!
//! All randomness flows from one global seed. Each consumer derives its own
//! generator from the seed plus a stream name (and optional extra keys such
//! as a spot id or epoch), so stages can be re-run independently and the
//! result never depends on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Named substreams used across the pipeline.
pub mod stream {
    pub const STAIN: &str = "stain";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const AUGMENT: &str = "augment";
    pub const FOLDS: &str = "folds";
    pub const FIXTURE: &str = "fixture";
}

/// Generator for `(seed, name, keys...)`.
pub fn substream(seed: u64, name: &str, keys: &[&[u8]]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for k in keys {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k);
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn named(seed: u64, name: &str) -> StreamRng {
    substream(seed, name, &[])
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
