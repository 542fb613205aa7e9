//! Named, seed-derived random streams.
//!
//! One run seed fans out into independent ChaCha streams ("init", "shuffle",
//! "pairing", "augment", ...), so adding draws to one stream never perturbs
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> Stream {
        ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ fnv1a(name.as_bytes())))
    }

    /// A stream further keyed by an index (per sample, per domain, ...).
    pub fn indexed(&self, name: &str, index: u64) -> Stream {
        ChaCha8Rng::seed_from_u64(splitmix(splitmix(self.seed ^ fnv1a(name.as_bytes())) ^ index))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
