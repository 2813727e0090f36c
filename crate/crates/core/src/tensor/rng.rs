use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// The crate-wide PRNG: ChaCha with 8 rounds, seeded from a `u64`.
///
/// Every random draw (initialisation, data synthesis, batch order, k-means
/// seeding) goes through this type, so a run is a pure function of its seeds.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fan-in scaled uniform initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    uniform_bounded(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// He initialisation for layers followed by ReLU: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn he_uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    uniform_bounded(shape, (6.0 / fan_in.max(1) as f64).sqrt(), rng)
}

fn uniform_bounded(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}
