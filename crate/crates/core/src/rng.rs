//! Seeded, counter-based random streams.
//!
//! Every consumer asks for its own `(purpose, index)` substream of the run
//! seed, so adding or removing draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named purposes; each owns a disjoint block of ChaCha stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    WorldMaps = 1,
    Splits = 2,
    Identity = 3,
    SampleNoise = 4,
    HeadInit = 5,
    Shuffle = 6,
    Masking = 7,
    Jitter = 8,
    Evaluation = 9,
    Background = 10,
    Perturbation = 11,
    PartEdit = 12,
    HumanProxy = 13,
    IdentityLatent = 14,
}

/// Stream `index` of `purpose` under `seed`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}
