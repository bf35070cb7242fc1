//! Seeded random streams.
//!
//! Every stochastic step draws from ChaCha8, which produces the same sequence
//! on every platform. Sub-streams are addressed by a 64-bit stream id so work
//! split across threads draws exactly what a serial loop would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
