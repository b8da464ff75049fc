//! Fast paths against the naive references in [`crate::oracle`].
//!
//! `perturb` multiplies every fast-path result by `1 + perturb` before it is
//! compared, which is how a broken build is simulated.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::acquisition::{imse, AcqPrecompute, Bounds};
use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, Design, KernelParams};
use crate::linalg::{cholesky, extend_inverse};
use crate::oracle;
use crate::sampler::ess_update;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Worst discrepancy over all instances, in the unit of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfcheckOptions {
    pub seed: u64,
    pub perturb: f64,
    /// Skip the Monte Carlo IMSE check, the only slow one.
    pub quick: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 20,
            perturb: 0.0,
            quick: false,
        }
    }
}

impl SelfcheckOptions {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }
}

fn rel(fast: f64, reference: f64) -> f64 {
    (fast - reference).abs() / reference.abs().max(1e-300)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, p: usize) -> Design {
    Design::from_fn(n, p, |_, _| rng.random())
}

fn timed(name: &'static str, tolerance: f64, instances: usize, f: impl FnOnce() -> f64) -> CheckOutcome {
    let start = Instant::now();
    let worst = f();
    CheckOutcome {
        name,
        worst,
        tolerance,
        instances,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Bordered inverse of an `(n+1)×(n+1)` SPD matrix against Gauss-Jordan
/// inversion, Frobenius-relative.
pub fn check_partitioned_inverse(instances: usize, seed: u64, perturb: f64) -> CheckOutcome {
    timed("partitioned inverse", 1e-10, instances, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = rng.random_range(1..=20);
            let full = oracle::random_spd(n + 1, &mut rng);
            let base = full.view((0, 0), (n, n)).into_owned();
            let k = full.view((0, n), (n, 1)).column(0).into_owned();
            let err = cholesky(&base).map(|c| c.inverse()).and_then(|base_inv| {
                let part = extend_inverse(&base_inv, &k, full[(n, n)])?;
                let fast = part.assemble(&base_inv) * (1.0 + perturb);
                let dense = oracle::gauss_jordan_inverse(&full);
                Ok((fast - &dense).norm() / dense.norm())
            });
            worst = worst.max(err.unwrap_or(f64::INFINITY));
        }
        worst
    })
}

/// ALC by the partitioned-inverse formula against explicit inversion of
/// both design covariances.
pub fn check_alc(instances: usize, seed: u64, perturb: f64) -> CheckOutcome {
    timed("ALC vs brute force", 1e-10, instances, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = rng.random_range(1..=20);
            let p = rng.random_range(1..=3);
            let wn = uniform(&mut rng, n, p);
            let wref = uniform(&mut rng, 10, p);
            let cand: Vec<f64> = (0..p).map(|_| rng.random()).collect();
            let theta = rng.random_range(0.05..1.0);
            let g = rng.random_range(1e-3..0.3);
            let tau2 = rng.random_range(0.5..2.0);
            let fast = AcqPrecompute::new(&wn, theta, g, tau2)
                .and_then(|pre| pre.with_reference(&wref))
                .and_then(|pre| pre.alc(&cand));
            let brute = oracle::alc_brute_force(&wn, &cand, &wref, theta, g, tau2);
            worst = worst.max(fast.map_or(f64::INFINITY, |f| rel(f * (1.0 + perturb), brute)));
        }
        worst
    })
}

/// Closed-form IMSE against adaptive Simpson quadrature, one latent
/// dimension, on a box wider than the design.
pub fn check_imse_quadrature(instances: usize, seed: u64, perturb: f64) -> CheckOutcome {
    timed("IMSE vs 1d quadrature", 1e-6, instances, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = rng.random_range(2..=12);
            let w = uniform(&mut rng, n, 1);
            let theta = rng.random_range(0.05..0.8);
            let g = rng.random_range(1e-3..0.2);
            let tau2 = rng.random_range(0.5..2.0);
            let (a, b) = (-rng.random_range(0.0..0.5), 1.0 + rng.random_range(0.0..0.5));
            let fast = Bounds::new(vec![a], vec![b]).and_then(|bd| imse(&w, theta, g, tau2, &bd));
            let quad = oracle::imse_quadrature_1d(&w, theta, g, tau2, a, b, 1e-13);
            worst = worst.max(fast.map_or(f64::INFINITY, |f| rel(f * (1.0 + perturb), quad)));
        }
        worst
    })
}

/// Closed-form IMSE against plain Monte Carlo in two latent dimensions.
pub fn check_imse_monte_carlo(instances: usize, samples: usize, seed: u64, perturb: f64) -> CheckOutcome {
    timed("IMSE vs 2d Monte Carlo", 1e-2, instances, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = rng.random_range(2..=10);
            let w = uniform(&mut rng, n, 2);
            let theta = rng.random_range(0.05..0.8);
            let g = rng.random_range(1e-3..0.2);
            let tau2 = rng.random_range(0.5..2.0);
            let bounds = match Bounds::covering(&w, &w) {
                Ok(b) => b,
                Err(_) => return f64::INFINITY,
            };
            let fast = imse(&w, theta, g, tau2, &bounds);
            let mc = oracle::imse_monte_carlo(&w, theta, g, tau2, &bounds.a, &bounds.b, samples, &mut rng);
            worst = worst.max(fast.map_or(f64::INFINITY, |f| rel(f * (1.0 + perturb), mc)));
        }
        worst
    })
}

/// Chained ESS under a constant likelihood must sample its MVN prior.
///
/// Reports the worst coordinate of `max(|mean| / 3se, |var/σ² − 1| / 0.05)`,
/// so the tolerance is 1.
pub fn check_ess_prior(steps: usize, n: usize, seed: u64, perturb: f64) -> CheckOutcome {
    timed("ESS prior recovery", 1.0, n, || {
        let x = Design::from_fn(n, 1, |i, _| i as f64 / (n.max(2) - 1) as f64);
        let k = match KernelParams::new(0.1, 1.0, 1e-6).map(|kp| cov_matrix(&x, &kp)) {
            Ok(k) => k,
            Err(_) => return f64::INFINITY,
        };
        let chol = match cholesky(&k) {
            Ok(c) => c,
            Err(_) => return f64::INFINITY,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = DVector::zeros(n);
        let mut sum = DVector::zeros(n);
        let mut sum2 = DVector::zeros(n);
        for _ in 0..steps {
            match ess_update(&f, 0.0, &chol, |_| Ok((0.0, ())), &mut rng) {
                Ok(out) => f = out.f,
                Err(_) => return f64::INFINITY,
            }
            let seen = &f * (1.0 + perturb);
            sum += &seen;
            sum2 += seen.map(|v| v * v);
        }
        let s = steps as f64;
        (0..n)
            .map(|i| {
                let mean = sum[i] / s;
                let var = sum2[i] / s - mean * mean;
                let se = (k[(i, i)] / s).sqrt();
                (mean.abs() / (3.0 * se)).max((var / k[(i, i)] - 1.0).abs() / 0.05)
            })
            .fold(0.0, f64::max)
    })
}

/// The whole suite at the sizes used by the acceptance tests.
pub fn run_selfcheck(opts: &SelfcheckOptions) -> Vec<CheckOutcome> {
    let s = opts.seed;
    let mut out = vec![
        check_partitioned_inverse(100, s, opts.perturb),
        check_alc(100, s + 1, opts.perturb),
        check_imse_quadrature(20, s + 2, opts.perturb),
    ];
    if !opts.quick {
        out.push(check_imse_monte_carlo(20, 1_000_000, s + 3, opts.perturb));
    }
    out.push(check_ess_prior(10_000, 20, s + 4, opts.perturb));
    out
}
