//! Deterministic random streams.
//!
//! Every unit of parallel work (an episode, a fold, a view) draws from its own
//! ChaCha stream keyed by `(seed, stream)`, so results never depend on the
//! order in which workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a stream id from a namespace tag and two indices.
pub fn key(tag: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing; collisions only matter within one seed
    let mut z = tag
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    z ^= z >> 31;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 29)
}
