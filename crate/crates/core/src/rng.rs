//! Seed derivation.
//!
//! All randomness in the crate funnels through one root seed. Every
//! consumer (parameter init, batch shuffling, per-step dropout, sampling)
//! derives its own stream from `(root seed, purpose string)` so streams
//! are independent of call order and resume reproduces them exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic child RNG from the root seed and a purpose label.
///
/// Labels are path-like, e.g. `"init/psm.conv0.msg0.wh"` or
/// `"dropout/step42"`.
pub fn derive_rng(root_seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
