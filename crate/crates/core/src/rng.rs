//! Deterministic seed derivation and RNG construction.
//!
//! All randomness in the pipeline flows from one experiment seed through
//! stable hashing, so per-example work can run in any order (or in
//! parallel) and still reproduce bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of parts
/// (e.g. `[purpose, epoch, example_index]`).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x243f6a8885a308d3);
    for &p in parts {
        state = mix(state ^ p);
    }
    state
}

/// Stable tag for naming RNG streams.
pub fn stream_tag(name: &str) -> u64 {
    let mut state = 0xcbf29ce484222325u64; // FNV-1a
    for b in name.bytes() {
        state ^= b as u64;
        state = state.wrapping_mul(0x100000001b3);
    }
    state
}

pub fn rng_from(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
