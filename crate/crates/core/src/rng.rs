//! Seeded randomness.
//!
//! Every stochastic choice in a run derives from one 64-bit seed. The
//! generator is ChaCha8; each consumer reads from its own fixed stream so
//! that, for example, changing the split fractions never alters the
//! initial weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Fixed stream offsets for the consumers of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Splits = 2,
    SbmEdges = 3,
    SbmFeatures = 4,
    PowerRestart = 5,
    Verify = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
