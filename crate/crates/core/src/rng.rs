//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit seed. Independent streams
//! (per band, per sample, per step) are derived by mixing the base seed with
//! a stream index so results never depend on scheduling order.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StrideRng = ChaCha8Rng;

/// SplitMix64 finalizer, used to decorrelate derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0x5EED)))
}

pub fn rng_from(seed: u64) -> StrideRng {
    StrideRng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> StrideRng {
    rng_from(derive_seed(seed, stream))
}

pub fn gaussian_array(rng: &mut StrideRng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian(rng: &mut StrideRng) -> f64 {
    rng.sample(StandardNormal)
}
