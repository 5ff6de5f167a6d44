//! Independent named random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Toggling one consumer (say, VAE noise) never shifts the draws seen by the
/// others because each owns its own ChaCha stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub generation: ChaCha8Rng,
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            init: stream(seed, 1),
            shuffle: stream(seed, 2),
            noise: stream(seed, 3),
            generation: stream(seed, 4),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a = RngStreams::new(7);
        let mut b = RngStreams::new(7);
        let _ = a.noise.random::<u64>();
        assert_eq!(a.shuffle.random::<u64>(), b.shuffle.random::<u64>());
        assert_ne!(b.init.random::<u64>(), b.shuffle.random::<u64>());
    }
}
