//! Counter-based random streams.
//!
//! Every random draw in MC sampling is addressed by `(seed, sample, layer)`,
//! so results are identical however the work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent child seed, e.g. one per input example.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_mul(GOLDEN)))
}

/// Generator for MC sample `sample` at layer `layer` under `seed`.
///
/// The sample index selects the ChaCha stream and the layer index a disjoint
/// 2^40-word region of it.
pub fn stream_rng(seed: u64, sample: u64, layer: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    rng.set_word_pos(u128::from(layer) << 40);
    rng
}
