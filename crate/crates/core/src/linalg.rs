//! Dense symmetric positive-definite kernels.
//!
//! Every inverse in the crate is routed through a Cholesky factor; there is
//! no general LU path. Matrices are `nalgebra::DMatrix<f64>` and callers only
//! rely on index-based access.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal jitter added when a nominally noiseless covariance fails to
/// factor.
pub const JITTER: f64 = 1e-8;

/// Smallest admissible Schur complement in [`extend_inverse`].
pub const DEGENERATE_TOL: f64 = 1e-12;

/// Lower Cholesky factor `L` with `L Lᵀ = A`.
///
/// `jitter` records the diagonal inflation that was needed to obtain the
/// factor (zero when `A` factored as given).
#[derive(Clone, Debug)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Diagonal jitter folded into the factored matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log |A| = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::mismatch("solve_spd rhs", self.dim(), b.len()));
        }
        Ok(self.chol.solve(b))
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::mismatch("solve_spd rhs", self.dim(), b.nrows()));
        }
        Ok(self.chol.solve(b))
    }

    /// `L⁻¹ b`, the half-solve used for quadratic forms and whitening.
    pub fn half_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::mismatch("half_solve rhs", self.dim(), b.len()));
        }
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        Ok(out)
    }

    pub fn half_solve_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::mismatch("half_solve rhs", self.dim(), b.nrows()));
        }
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        Ok(out)
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> Result<f64> {
        Ok(self.half_solve(b)?.norm_squared())
    }

    /// `L z`; maps a standard normal vector to a draw from `N(0, A)`.
    pub fn lower_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().lower_triangle() * z
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factor `a`, failing with [`Error::NotPositiveDefinite`] if any pivot is
/// non-positive.
pub fn cholesky(a: &DMatrix<f64>) -> Result<CholFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::mismatch("cholesky (square)", a.nrows(), a.ncols()));
    }
    debug_assert!(is_symmetric(a, 1e-10), "cholesky input is not symmetric");
    let dim = a.nrows();
    Cholesky::new(a.clone())
        .filter(|c| (0..dim).all(|i| c.l_dirty()[(i, i)] > 0.0))
        .map(|chol| CholFactor { chol, jitter: 0.0 })
        .ok_or(Error::NotPositiveDefinite { dim })
}

/// Factor `a`; on failure add [`JITTER`] to the diagonal and retry once.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<CholFactor> {
    match cholesky(a) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {
            let mut b = a.clone();
            for i in 0..b.nrows() {
                b[(i, i)] += JITTER;
            }
            let mut f = cholesky(&b)?;
            f.jitter = JITTER;
            Ok(f)
        }
        Err(e) => Err(e),
    }
}

pub fn logdet(l: &CholFactor) -> f64 {
    l.logdet()
}

/// `A⁻¹ b` for a vector right-hand side.
pub fn solve_spd(l: &CholFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    l.solve_vec(b)
}

fn is_symmetric(a: &DMatrix<f64>, rel: f64) -> bool {
    let scale = a.amax().max(1.0);
    (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rel * scale))
}

/// Inverse of `[[C, k], [kᵀ, corner]]` expressed through the known `C⁻¹`.
///
/// With `v = corner − kᵀC⁻¹k` and `h = −v⁻¹C⁻¹k`, the assembled inverse is
/// `[[C⁻¹ + h hᵀ v, h], [hᵀ, v⁻¹]]`.
#[derive(Clone, Debug)]
pub struct PartitionedInverse {
    pub v: f64,
    pub h: DVector<f64>,
}

impl PartitionedInverse {
    pub fn assemble(&self, base_inv: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.h.len();
        let mut out = DMatrix::zeros(n + 1, n + 1);
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] = base_inv[(i, j)] + self.v * self.h[i] * self.h[j];
            }
            out[(n, j)] = self.h[j];
            out[(j, n)] = self.h[j];
        }
        out[(n, n)] = 1.0 / self.v;
        out
    }
}

pub fn extend_inverse(
    base_inv: &DMatrix<f64>,
    k: &DVector<f64>,
    corner: f64,
) -> Result<PartitionedInverse> {
    let n = k.len();
    if base_inv.nrows() != n || base_inv.ncols() != n {
        return Err(Error::mismatch("extend_inverse", n, base_inv.nrows()));
    }
    let ck = base_inv * k;
    let v = corner - k.dot(&ck);
    if v <= DEGENERATE_TOL {
        return Err(Error::DegenerateUpdate { v });
    }
    Ok(PartitionedInverse { v, h: ck * (-1.0 / v) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_factor_is_identity() {
        let f = cholesky(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(f.lower(), DMatrix::identity(3, 3));
        assert_eq!(f.logdet(), 0.0);
    }

    #[test]
    fn two_by_two_factor() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky(&a).unwrap().lower();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!((&l - &expected).amax() < 1e-15);
        assert!((&l * l.transpose() - &a).amax() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        // eigenvalues 3 and -1
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite { dim: 2 })
        ));
        assert!(cholesky_jittered(&a).is_err());
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let f = cholesky_jittered(&a).unwrap();
        assert_eq!(f.jitter(), JITTER);
    }

    #[test]
    fn logdet_small_cases() {
        let f = cholesky(&DMatrix::identity(5, 5)).unwrap();
        assert_eq!(logdet(&f), 0.0);
        let f = cholesky(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((logdet(&f) - 4f64.ln()).abs() < 1e-15);
        assert!((logdet(&f) - 1.386_294_4).abs() < 1e-7);
    }

    #[test]
    fn logdet_matches_elimination_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = oracle::random_spd(6, &mut rng);
            let f = cholesky(&a).unwrap();
            let det = oracle::determinant(&a);
            assert!((f.logdet() - det.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_examples() {
        let f = cholesky(&DMatrix::identity(3, 3)).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(solve_spd(&f, &b).unwrap(), b);

        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = cholesky(&a).unwrap();
        let x = solve_spd(&f, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((x[0] - 0.375).abs() < 1e-15);
        assert!((x[1] + 0.25).abs() < 1e-15);

        assert!(matches!(
            solve_spd(&f, &DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matrix_rhs_matches_column_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = oracle::random_spd(5, &mut rng);
        let b = oracle::random_matrix(5, 3, &mut rng);
        let f = cholesky(&a).unwrap();
        let x = f.solve_mat(&b).unwrap();
        for j in 0..3 {
            let col = f.solve_vec(&b.column(j).into_owned()).unwrap();
            assert!((x.column(j) - col).amax() < 1e-14);
        }
    }

    #[test]
    fn extend_inverse_empty_and_independent() {
        let g = 0.25;
        let p = extend_inverse(&DMatrix::zeros(0, 0), &DVector::zeros(0), 1.0 + g).unwrap();
        let inv = p.assemble(&DMatrix::zeros(0, 0));
        assert_eq!(inv.shape(), (1, 1));
        assert!((inv[(0, 0)] - 1.0 / (1.0 + g)).abs() < 1e-15);

        let base = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = extend_inverse(&base, &DVector::zeros(2), 1.0 + g).unwrap();
        assert_eq!(p.v, 1.0 + g);
        assert!(p.h.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn extend_inverse_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = oracle::random_spd(9, &mut rng);
        let base = full.view((0, 0), (8, 8)).into_owned();
        let k = full.view((0, 8), (8, 1)).column(0).into_owned();
        let base_inv = oracle::gauss_jordan_inverse(&base);
        let p = extend_inverse(&base_inv, &k, full[(8, 8)]).unwrap();
        let direct = oracle::gauss_jordan_inverse(&full);
        assert!(rel_err(&p.assemble(&base_inv), &direct) < 1e-10);
    }

    #[test]
    fn duplicate_point_is_degenerate() {
        let base_inv = DMatrix::identity(1, 1);
        let k = DVector::from_element(1, 1.0);
        assert!(matches!(
            extend_inverse(&base_inv, &k, 1.0),
            Err(Error::DegenerateUpdate { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn solve_round_trips(seed in any::<u64>(), n in 1usize..=50) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = oracle::random_spd(n, &mut rng);
                let b = oracle::random_matrix(n, 1, &mut rng).column(0).into_owned();
                let x = solve_spd(&cholesky(&a).unwrap(), &b).unwrap();
                prop_assert!((&a * x - &b).norm() / b.norm() <= 1e-10);
            }

            #[test]
            fn logdet_of_inverse_cancels(seed in any::<u64>(), n in 1usize..=20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = oracle::random_spd(n, &mut rng);
                let f = cholesky(&a).unwrap();
                let fi = cholesky(&oracle::symmetrize(&f.inverse())).unwrap();
                prop_assert!((f.logdet() + fi.logdet()).abs() <= 1e-8);
            }

            #[test]
            fn partitioned_inverse_is_exact(seed in any::<u64>(), n in 0usize..=20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let full = oracle::random_spd(n + 1, &mut rng);
                let base = full.view((0, 0), (n, n)).into_owned();
                let k = full.view((0, n), (n, 1)).column(0).into_owned();
                let base_inv = oracle::gauss_jordan_inverse(&base);
                let p = extend_inverse(&base_inv, &k, full[(n, n)]).unwrap();
                let direct = oracle::gauss_jordan_inverse(&full);
                prop_assert!(rel_err(&p.assemble(&base_inv), &direct) <= 1e-10);
            }
        }
    }
}
