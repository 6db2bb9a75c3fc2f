//! Reproducible random streams.
//!
//! Replicate `k` of experiment `s` under root seed `r` always draws from the
//! same ChaCha8 stream: the key comes from `r`, the 64-bit stream id packs
//! `(s, k)`. Parallel runs therefore do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Where a trajectory's randomness came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SeedId {
    pub root: u64,
    pub experiment: u32,
    pub replicate: u32,
}

impl SeedId {
    pub fn new(root: u64, experiment: u32, replicate: u32) -> SeedId {
        SeedId { root, experiment, replicate }
    }

    pub fn rng(&self) -> SimRng {
        stream(self.root, self.experiment, self.replicate)
    }
}

pub fn stream(root: u64, experiment: u32, replicate: u32) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((experiment as u64) << 32) | replicate as u64);
    rng
}
