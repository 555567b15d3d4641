//! Seeded random streams. Every source of randomness in a run derives from
//! the single run seed plus a fixed stream id.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub mod stream {
    pub const AE_INIT: u64 = 1;
    pub const AE_SHUFFLE: u64 = 2;
    pub const AE_DROPOUT: u64 = 3;
    pub const BACKBONE_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
}

/// Independent generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    // splitmix-style mixing so nearby seeds/streams give unrelated states
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    Xoshiro256PlusPlus::seed_from_u64(z ^ (z >> 31))
}

/// Generator for one epoch of a stream; training reseeds per epoch.
pub fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> Rng {
    rng_for(seed, stream.wrapping_mul(1_000_003).wrapping_add(epoch as u64))
}
