//! Deterministic random-stream derivation.
//!
//! Every piece of randomness in a run is drawn from a generator keyed by
//! `(seed, domain, index)`, so independent stages never share a stream and
//! any stage can be recomputed in isolation. This is what makes training
//! resumable bit-for-bit: step `n` always sees the same generator no matter
//! how many times the process restarted before reaching it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_MODEL_INIT: u64 = 0x11;
pub const DOMAIN_TRAIN_STEP: u64 = 0x22;
pub const DOMAIN_HOLDOUT: u64 = 0x33;
pub const DOMAIN_SAMPLE: u64 = 0x44;
pub const DOMAIN_SDF_EVAL: u64 = 0x55;
pub const DOMAIN_SNAPSHOT: u64 = 0x66;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes two words into one with full avalanche.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// The generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, domain), index))
}
