//! Deterministic seed splitting.
//!
//! Every experiment has one root seed. Streams for independent components
//! (environment noise, filter resampling, planner proposals, ...) are derived
//! from it by hashing, so toggling one component never reshuffles another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags used when splitting a per-rollout seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Rollout = 0x524f_4c4c,
    Env = 0x454e_5600,
    Filter = 0x4649_4c54,
    Planner = 0x504c_414e,
    Init = 0x494e_4954,
    Target = 0x5441_5247,
    Train = 0x5452_4149,
    Weights = 0x5745_4947,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `index` into `seed`. Distinct indices give statistically independent seeds.
pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x2545_f491_4f6c_dd1d)))
}

pub fn derive_stream(seed: u64, stream: Stream) -> u64 {
    derive(seed, stream as u64)
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    rng(derive_stream(seed, stream))
}

/// Seed of rollout `index` under experiment root `root`.
pub fn rollout_seed(root: u64, index: usize) -> u64 {
    derive(derive_stream(root, Stream::Rollout), index as u64)
}
