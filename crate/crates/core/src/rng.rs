//! Named random streams.
//!
//! All randomness is ChaCha8 seeded from a single 64-bit seed. Independent
//! consumers (a parameter prefix, a sample index, an epoch shuffle) each get
//! their own stream, selected by hashing a label, so adding or removing one
//! consumer never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded in logs next to the seed.
pub const ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.3), stream = FNV-1a-64(label)";

/// FNV-1a, 64-bit.
pub fn stream_id(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(label));
    rng
}
