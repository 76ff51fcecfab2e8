//! Named, independent random streams derived from a single root seed.
//!
//! Each stream (and each indexed sub-stream) is a separate ChaCha stream
//! with the same key, so drawing from one never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Initial condition of the truth run.
    Truth = 1,
    /// Observation noise.
    Observations = 2,
    /// Initial ensemble perturbations.
    Ensemble = 3,
    /// Monte Carlo reference samples.
    MonteCarlo = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, s: Stream) -> ChaCha12Rng {
        self.substream(s, 0)
    }

    /// Sub-stream `index` of `s`, e.g. one per evidencing window.
    pub fn substream(&self, s: Stream, index: u64) -> ChaCha12Rng {
        assert!(index < 1 << 56, "sub-stream index out of range");
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(((s as u64) << 56) | index);
        rng
    }
}
