//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from a
//! seed plus a purpose tag and up to two integer keys, so results never
//! depend on the order in which clients or rounds are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes. Distinct tags keep streams of one seed disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ClusterParams = 1,
    Mixture = 2,
    ShardSizes = 3,
    Shard = 4,
    Holdout = 5,
    Init = 6,
    Selection = 7,
    LocalSolve = 8,
    Participation = 9,
    ClassMeans = 10,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> SimRng {
    let key = mix(seed ^ mix(purpose as u64)) ^ mix(a.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(mix(b ^ (purpose as u64).rotate_left(32)));
    rng
}
