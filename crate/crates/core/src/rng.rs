//! Seeded randomness.
//!
//! All stochastic operations take an explicit generator; there is no global
//! RNG anywhere in the crate. `ChaCha8` is counter-based and produces the
//! same stream on every platform, which is what makes byte-identical run
//! outputs possible.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The generator used throughout the crate.
pub type Generator = ChaCha8Rng;

/// Root generator for a run.
pub fn from_seed(seed: u64) -> Generator {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for item `index` of a batch under `base_seed`.
///
/// Uses the ChaCha stream id, so batch items can run in parallel without
/// sharing or splitting a single stream.
pub fn for_item(base_seed: u64, index: u64) -> Generator {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Standard normal vector of length `dim`.
pub fn standard_normal(rng: &mut Generator, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}
