//! Deterministic seed fan-out.
//!
//! One master seed drives the whole run. Every consumer (model init, message
//! sampling, crop sampling, distortion sampling, shuffles) derives its own
//! stream from `(master, purpose, index)` so that changing one consumer's
//! draw count never perturbs another's.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; stable across platforms and releases.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-seed from the master seed, a purpose label, and an index.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut state = master;
    let mut acc = splitmix64(&mut state);
    for byte in purpose.as_bytes() {
        state ^= u64::from(*byte);
        acc ^= splitmix64(&mut state);
    }
    state ^= index;
    acc ^ splitmix64(&mut state)
}

/// RNG for a derived stream. ChaCha8 is portable and reproducible.
pub fn stream_rng(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, index))
}

/// RNG straight from an explicit seed (used where the seed itself is the API).
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
