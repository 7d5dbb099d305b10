//! Seeded randomness.
//!
//! Everything random in the crate draws from ChaCha8 seeded with a `u64`, so
//! a seed fixes every dataset, initialization and dropout mask bit for bit
//! across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from a base seed and a stream tag.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
