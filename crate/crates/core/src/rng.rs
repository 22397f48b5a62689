//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Shuffle = 4,
    Eval = 5,
}

/// Independent generator for one purpose; re-seeding one stream never shifts
/// the draws of another.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Per-epoch generator, so a resumed run draws the same numbers as an
/// uninterrupted one.
pub fn epoch_stream(seed: u64, which: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 32) | epoch as u64);
    rng
}
