//! Seeded random sub-streams. One ChaCha key per run seed; each consumer gets its
//! own stream id so turning one consumer on or off never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    RandInt = 3,
    World = 4,
    WorldRow = 5,
    Sae = 6,
    Resample = 7,
    Cluster = 8,
    Curve = 9,
    Backbone = 10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    seed: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(purpose, index)`.
    pub fn stream(&self, purpose: Stream, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 48) ^ index);
        rng
    }

    /// Derives a child seed family, e.g. one per (concept, polarity) job.
    pub fn child(&self, tag: u64) -> Seeds {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37_79B9_7F4A_7C15);
        rng.set_stream(tag);
        Seeds::new(rng.next_u64())
    }
}
