//! Deterministic random streams.
//!
//! A stream is identified by `(seed, stream_id)`. The generator is ChaCha8,
//! whose 64-bit stream parameter selects an independent keystream for the
//! same key, so purposes (data, noise, label flips, ...) never share draws.
//! [`RngStream::substream`] derives a child stream from an integer index;
//! this is what makes per-sample randomness independent of how samples are
//! distributed across shards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// Named purposes. The discriminant is mixed into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Data = 1,
    Noise = 2,
    LabelFlip = 3,
    Shuffle = 4,
    Instance = 5,
    Probe = 6,
    Init = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

// splitmix64 finaliser
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose) -> Self {
        Self::new(seed, mix(purpose as u64))
    }

    /// Child stream for `index`, e.g. one per sample or per seed replica.
    pub fn substream(&self, index: u64) -> Self {
        Self::new(self.seed, mix(self.stream_id ^ mix(index.wrapping_add(1))))
    }

    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
