//! The one generator used for every seeded decision in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type FedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> FedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A generator for one `(seed, stream)` pair. Streams of the same seed are
/// independent, so per-round client training can be keyed by round number
/// without depending on how many rounds the client took part in before.
pub fn seeded_stream(seed: u64, stream: u64) -> FedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
