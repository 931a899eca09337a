//! Named random streams split off a single master seed.
//!
//! Each stream is a ChaCha8 generator keyed by `(master seed, purpose)`,
//! positioned on the ChaCha stream id `a` (typically a client id) and on a
//! disjoint block-counter window selected by `b` (typically a round). The
//! mapping is a pure function of its inputs, so any component can be
//! re-executed in isolation and results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is mixed into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    Holdout = 2,
    Partition = 3,
    ModelInit = 4,
    HeteroAssign = 5,
    HeadInit = 6,
    Selection = 7,
    LocalTrain = 8,
    Mask = 9,
    Prop1 = 10,
}

/// Word offset between round windows: 2^36 words per (stream id, round).
const WINDOW_BITS: u32 = 36;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream for `purpose`, sub-indexed by `a` (client / chunk id) and `b`
    /// (round). `b` must stay below 2^32.
    pub fn stream(&self, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
        debug_assert!(b < 1 << 32);
        let key = splitmix64(self.master ^ splitmix64(purpose as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(a);
        rng.set_word_pos(u128::from(b) << WINDOW_BITS);
        rng
    }
}
