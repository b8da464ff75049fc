//! Isotropic squared-exponential covariance.
//!
//! `Σ_ij = τ² (exp(−‖x_i − x_j‖² / θ) + g·1{i=j})`. Latent layers use the
//! unit-scale, noiseless form (`τ² = 1`, `g = 0`).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row-per-point input matrix. Training designs are coded to `[0, 1]^d`;
/// latent designs are unbounded.
pub type Design = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    /// Lengthscale, in squared input-distance units.
    pub theta: f64,
    /// Scale.
    pub tau2: f64,
    /// Nugget, as a proportion of `tau2`.
    pub g: f64,
}

impl KernelParams {
    pub fn new(theta: f64, tau2: f64, g: f64) -> Result<Self> {
        if !(theta > 0.0 && tau2 > 0.0 && g >= 0.0) || !(theta.is_finite() && tau2.is_finite()) {
            return Err(Error::Domain(format!(
                "kernel parameters need theta > 0, tau2 > 0, g >= 0 (got {theta}, {tau2}, {g})"
            )));
        }
        Ok(Self { theta, tau2, g })
    }

    /// Unit scale, no nugget.
    pub fn latent(theta: f64) -> Result<Self> {
        Self::new(theta, 1.0, 0.0)
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn sq_dist(a: &Design, b: &Design) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::mismatch("sq_dist columns", a.ncols(), b.ncols()));
    }
    let d = a.ncols();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (0..d)
            .map(|k| {
                let diff = a[(i, k)] - b[(j, k)];
                diff * diff
            })
            .sum()
    }))
}

/// Symmetric, zero-diagonal distance matrix of a single design.
pub fn sq_dist_self(a: &Design) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let v: f64 = (0..a.ncols())
                .map(|k| {
                    let diff = a[(i, k)] - a[(j, k)];
                    diff * diff
                })
                .sum();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `τ² (exp(−D/θ) + g I)` from a precomputed square distance matrix.
pub fn cov_from_dist(dist: &DMatrix<f64>, p: &KernelParams) -> DMatrix<f64> {
    let mut k = dist.map(|d| p.tau2 * (-d / p.theta).exp());
    for i in 0..k.nrows() {
        k[(i, i)] = p.tau2 * (1.0 + p.g);
    }
    k
}

pub fn cov_matrix(x: &Design, p: &KernelParams) -> DMatrix<f64> {
    cov_from_dist(&sq_dist_self(x), p)
}

/// Unscaled, nugget-free cross-correlation `exp(−‖a_i − b_j‖²/θ)`.
pub fn cross_cov(a: &Design, b: &Design, theta: f64) -> Result<DMatrix<f64>> {
    Ok(sq_dist(a, b)?.map(|d| (-d / theta).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sq_dist_examples() {
        let p = Design::from_row_slice(1, 1, &[0.3]);
        assert_eq!(sq_dist(&p, &p).unwrap()[(0, 0)], 0.0);
        let a = Design::from_row_slice(1, 1, &[0.0]);
        let b = Design::from_row_slice(1, 1, &[1.0]);
        assert_eq!(sq_dist(&a, &b).unwrap()[(0, 0)], 1.0);
        let a = Design::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = Design::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(sq_dist(&a, &b).unwrap()[(0, 0)], 25.0);
        assert!(matches!(
            sq_dist(&a, &Design::zeros(1, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cov_matrix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = oracle::random_matrix(7, 3, &mut rng);
        let p = KernelParams::new(0.7, 2.5, 0.1).unwrap();
        let c = cov_matrix(&x, &p);
        for i in 0..7 {
            assert_eq!(c[(i, i)], 2.5 * 1.1);
        }

        let x = Design::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = cov_matrix(&x, &KernelParams::new(1.0, 1.0, 0.0).unwrap());
        assert!((c[(0, 1)] - 0.367_879_4).abs() < 1e-7);

        let x = Design::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let c = cov_matrix(&x, &KernelParams::new(1e12, 1.0, 0.0).unwrap());
        assert!((c[(0, 2)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_cov_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = oracle::random_matrix(5, 2, &mut rng);
        let k = cross_cov(&a, &a, 0.3).unwrap();
        assert!((0..5).all(|i| k[(i, i)] == 1.0));

        let a = Design::from_row_slice(1, 1, &[0.0]);
        let b = Design::from_row_slice(1, 1, &[2.0]);
        assert!((cross_cov(&a, &b, 4.0).unwrap()[(0, 0)] - (-1f64).exp()).abs() < 1e-15);

        let a = oracle::random_matrix(4, 2, &mut rng);
        let b = oracle::random_matrix(6, 2, &mut rng);
        let full = cross_cov(&a, &b, 0.8).unwrap();
        let half = cross_cov(&a, &b, 0.4).unwrap();
        assert!((half - full.map(|v| v * v)).amax() < 1e-14);
    }

    #[test]
    fn cross_cov_agrees_with_cov_off_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = oracle::random_matrix(6, 2, &mut rng);
        let k = cross_cov(&x, &x, 0.5).unwrap();
        let c = cov_matrix(&x, &KernelParams::latent(0.5).unwrap());
        assert!((k - c).amax() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, 1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn nugget_keeps_distinct_designs_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(1..=40);
            let d = rng.random_range(1..=3);
            let x = Design::from_fn(n, d, |_, _| rng.random::<f64>());
            let theta = rng.random_range(0.01..2.0);
            let c = cov_matrix(&x, &KernelParams::new(theta, 1.0, 1e-8).unwrap());
            assert!(cholesky(&c).is_ok(), "n={n} d={d} theta={theta}");
        }
    }

    proptest! {
        #[test]
        fn permutation_exchangeability(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = oracle::random_matrix(n, 2, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let xp = Design::from_fn(n, 2, |i, j| x[(perm[i], j)]);
            let p = KernelParams::new(0.6, 1.3, 0.05).unwrap();
            let c = cov_matrix(&x, &p);
            let cp = cov_matrix(&xp, &p);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(cp[(i, j)], c[(perm[i], perm[j])]);
                }
            }
        }
    }
}
