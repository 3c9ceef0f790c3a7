//! Schedule-independent seeding.
//!
//! Every random choice in the pipeline draws from a generator seeded by a
//! stable hash of the global seed and the identity of the work unit, so the
//! output never depends on which worker handled which unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator type used for all seeded choices.
pub type UnitRng = ChaCha8Rng;

/// Stable 64-bit hash over length-prefixed parts.
pub fn hash64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seed for the triple filter of one sentence.
pub fn sentence_seed(global_seed: u64, doc_id: &str, sentence_index: usize) -> u64 {
    hash64(&[
        &global_seed.to_le_bytes(),
        b"sentence",
        doc_id.as_bytes(),
        &(sentence_index as u64).to_le_bytes(),
    ])
}

/// Seed for the per-document choices of one epoch.
pub fn document_seed(global_seed: u64, doc_id: &str, epoch: u32) -> u64 {
    hash64(&[
        &global_seed.to_le_bytes(),
        b"document",
        doc_id.as_bytes(),
        &u64::from(epoch).to_le_bytes(),
    ])
}

pub fn rng_from_seed(seed: u64) -> UnitRng {
    ChaCha8Rng::seed_from_u64(seed)
}
