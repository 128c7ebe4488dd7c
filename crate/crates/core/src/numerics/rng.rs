//! Seeded randomness. Every stochastic step in the crate draws from a
//! [`ModelRng`] so identical seeds replay identical trajectories.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub type ModelRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

pub fn standard_normal_vec(rng: &mut ModelRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws an index from a categorical distribution. The weights need not be
/// normalized; the last index with positive weight absorbs rounding slack.
pub fn sample_categorical(rng: &mut ModelRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}
