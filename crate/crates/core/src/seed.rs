//! Deterministic RNG stream derivation.
//!
//! Every run in a sweep owns an independent stream derived by hashing
//! `(master_seed, run_id)`, so results are invariant to the degree of
//! parallelism and to the order in which runs are dispatched.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream for `run_id` under `master_seed`.
pub fn derive_stream(master_seed: u64, run_id: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"snmdp-lab/stream/v1");
    hasher.update(master_seed.to_le_bytes());
    hasher.update((run_id.len() as u64).to_le_bytes());
    hasher.update(run_id.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

/// Convenience for numeric sub-stream ids.
pub fn derive_substream(master_seed: u64, run_id: &str, label: &str) -> ChaCha12Rng {
    derive_stream(master_seed, &format!("{run_id}/{label}"))
}
