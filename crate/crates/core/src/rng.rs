//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by
//! the run seed, the task index and the purpose, so that e.g. the number of
//! dropout draws in one phase never shifts the initialisation of the next.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose of a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Dropout = 3,
    Memory = 4,
    Noise = 5,
    Distill = 6,
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(task, purpose)` under `seed`.
pub fn stream(seed: u64, task: usize, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 8) | purpose as u64);
    rng
}
