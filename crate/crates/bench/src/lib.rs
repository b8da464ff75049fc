//! Fixtures shared by the benchmarks.

use dgp_core::campaign::{f_piecewise_1d, lhs};
use dgp_core::{Dataset, Design};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Noisy piecewise-function data at an `n`-point Latin hypercube.
pub fn piecewise_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = lhs(n, 1, &mut rng);
    let y = x.column(0).map(|v| {
        let e: f64 = rng.sample(StandardNormal);
        f_piecewise_1d(v).expect("inside [0, 1]") + 0.1 * e
    });
    Dataset::new(x, y).expect("matching rows")
}

pub fn uniform_design(n: usize, d: usize, seed: u64) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Design::from_fn(n, d, |_, _| rng.random())
}
