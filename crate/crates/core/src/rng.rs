//! The single pseudo-random generator used by the engine.
//!
//! Every random draw goes through [`EngineRng`], a ChaCha8 stream cipher
//! generator (`rand_chacha::ChaCha8Rng`). ChaCha output is specified
//! independently of platform and word size, so a given seed reproduces the
//! same stream everywhere. Sub-streams for a particular purpose (a session's
//! epoch shuffle, one step's pseudo-batch, a class's attribute draw) are keyed
//! by mixing the run seed with a purpose tag and integer coordinates through
//! SplitMix64, so no generator state ever has to be persisted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type EngineRng = ChaCha8Rng;

/// Purpose tags for derived streams. Values are part of the reproducibility
/// contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    TaskSplit = 1,
    Synthetic = 2,
    TrainTestSplit = 3,
    AttributeDraw = 4,
    EpochShuffle = 5,
    PseudoBatch = 6,
    RandomSelection = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a run seed, a stream tag and coordinates.
pub fn derive_seed(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ (stream as u64).rotate_left(32));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn rng_from_seed(seed: u64) -> EngineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: Stream, coords: &[u64]) -> EngineRng {
    rng_from_seed(derive_seed(seed, stream, coords))
}

pub fn standard_normal(rng: &mut EngineRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fisher-Yates shuffle driven by the engine generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut EngineRng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

pub fn uniform_index(rng: &mut EngineRng, len: usize) -> usize {
    rng.random_range(0..len)
}

pub fn uniform_f64(rng: &mut EngineRng) -> f64 {
    rng.random::<f64>()
}
