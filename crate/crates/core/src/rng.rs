//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by a
//! `(seed, stream id)` pair, so results never depend on how work is split
//! across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream id namespaces. Each consumer owns a disjoint range.
pub(crate) mod tag {
    pub const MEASUREMENT: u64 = 1 << 40;
    pub const DIFFUSE: u64 = 2 << 40;
    pub const SAMPLER_INIT: u64 = 3 << 40;
    pub const SAMPLER_STEP: u64 = 4 << 40;
    pub const PHANTOM: u64 = 5 << 40;
    pub const CLUSTER: u64 = 6 << 40;
}

/// Opens the stream `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills a vector with standard-normal draws from stream `(seed, stream)`.
pub fn standard_normal(seed: u64, stream_id: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, stream_id);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
