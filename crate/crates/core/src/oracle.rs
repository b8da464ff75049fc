//! Reference implementations used to verify the fast paths.
//!
//! Everything here is deliberately naive: explicit Gauss-Jordan inverses,
//! elimination determinants, brute-force sums and numerical quadrature. None
//! of it shares code with `linalg`, `gp` or `acquisition` beyond the matrix
//! container, so agreement between the two routes is meaningful.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Well-conditioned random SPD matrix `B Bᵀ / n + I / 2`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let b = random_matrix(n, n, rng);
    let mut a = &b * b.transpose() / (n.max(1) as f64);
    for i in 0..n {
        a[(i, i)] += 0.5;
    }
    symmetrize(&a)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = DMatrix::identity(n, n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        m.swap_rows(col, pivot);
        inv.swap_rows(col, pivot);
        let p = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                if f != 0.0 {
                    for j in 0..n {
                        m[(i, j)] -= f * m[(col, j)];
                        inv[(i, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
    }
    inv
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        if pivot != col {
            m.swap_rows(col, pivot);
            det = -det;
        }
        let p = m[(col, col)];
        det *= p;
        if p == 0.0 {
            return 0.0;
        }
        for i in col + 1..n {
            let f = m[(i, col)] / p;
            for j in col..n {
                m[(i, j)] -= f * m[(col, j)];
            }
        }
    }
    det
}

fn sq_dist_rows(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// `exp(−‖a_i − b_j‖² / θ)` assembled entry by entry.
pub fn gaussian_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (-sq_dist_rows(&row(a, i), &row(b, j)) / theta).exp()
    })
}

fn nugget_cov(x: &DMatrix<f64>, theta: f64, g: f64) -> DMatrix<f64> {
    let mut c = gaussian_kernel(x, x, theta);
    for i in 0..c.nrows() {
        c[(i, i)] += g;
    }
    c
}

/// Predictive mean and covariance assembled with an explicit dense inverse.
pub fn dense_predict(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    xtest: &DMatrix<f64>,
    theta: f64,
    tau2: f64,
    g: f64,
    noise_free_test: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let cinv = gauss_jordan_inverse(&nugget_cov(x, theta, g));
    let cross = gaussian_kernel(xtest, x, theta);
    let mean = &cross * &cinv * y;
    let test_nugget = if noise_free_test { 0.0 } else { g };
    let prior = nugget_cov(xtest, theta, test_nugget);
    let cov = (prior - &cross * &cinv * cross.transpose()) * tau2;
    (mean, cov)
}

/// MVN log density `log N(y; 0, Σ)` including all constants.
pub fn mvn_logpdf(y: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let inv = gauss_jordan_inverse(sigma);
    let det = determinant(sigma);
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * y.dot(&(inv * y))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Dot product evaluated as if in twice the working precision (Ogita, Rump
/// and Oishi's `Dot2`).
pub fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let perr = x.mul_add(y, -p);
        let (t, serr) = two_sum(s, p);
        s = t;
        c += serr + perr;
    }
    s + c
}

/// A dense SPD system solved by Gauss-Jordan followed by iterative
/// refinement with doubled-precision residuals. Quadratic forms come out
/// accurate to a few ulps even when the matrix is badly conditioned, which
/// matters when two of them are subtracted.
pub struct DenseSystem {
    rows: Vec<Vec<f64>>,
    inv: DMatrix<f64>,
}

impl DenseSystem {
    pub fn new(a: &DMatrix<f64>) -> Self {
        Self {
            rows: (0..a.nrows()).map(|i| row(a, i)).collect(),
            inv: gauss_jordan_inverse(a),
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x: Vec<f64> = (&self.inv * DVector::from_column_slice(b)).iter().copied().collect();
        for _ in 0..4 {
            // r = b − A x, each entry as one long dot product
            let r = DVector::from_fn(n, |i, _| {
                let mut lhs = self.rows[i].clone();
                lhs.push(-1.0);
                let mut rhs = x.clone();
                rhs.push(b[i]);
                -dot2(&lhs, &rhs)
            });
            let dx = &self.inv * r;
            x.iter_mut().zip(dx.iter()).for_each(|(xi, d)| *xi += d);
        }
        x
    }

    /// `kᵀ A⁻¹ k`.
    pub fn quad(&self, k: &[f64]) -> f64 {
        dot2(k, &self.solve(k))
    }
}

/// Variance-of-the-mean reduction summed over a reference set, from
/// separate solves against `C_n` and `C_{n+1}`.
pub fn alc_brute_force(
    wn: &DMatrix<f64>,
    candidate: &[f64],
    wref: &DMatrix<f64>,
    theta: f64,
    g: f64,
    tau2: f64,
) -> f64 {
    let n = wn.nrows();
    let wn1 = stack_row(wn, candidate);
    let cn = DenseSystem::new(&nugget_cov(wn, theta, g));
    let cn1 = DenseSystem::new(&nugget_cov(&wn1, theta, g));
    let kn = gaussian_kernel(wn, wref, theta);
    let kn1 = gaussian_kernel(&wn1, wref, theta);
    let mut total = 0.0;
    for r in 0..wref.nrows() {
        let a: Vec<f64> = kn1.column(r).iter().copied().collect();
        let b: Vec<f64> = kn.column(r).iter().copied().collect();
        let with = cn1.quad(&a);
        let without = if n == 0 { 0.0 } else { cn.quad(&b) };
        total += tau2 * (with - without);
    }
    total
}

pub fn stack_row(m: &DMatrix<f64>, extra: &[f64]) -> DMatrix<f64> {
    let n = m.nrows();
    let cols = extra.len();
    DMatrix::from_fn(n + 1, cols, |i, j| if i < n { m[(i, j)] } else { extra[j] })
}

/// Posterior variance of the mean at `w` given design `wn1`, `Σ(w) = 1`.
pub fn mean_variance_at(
    wn1: &DMatrix<f64>,
    c: &DenseSystem,
    w: &[f64],
    theta: f64,
    tau2: f64,
) -> f64 {
    let k: Vec<f64> = (0..wn1.nrows())
        .map(|i| (-sq_dist_rows(&row(wn1, i), w) / theta).exp())
        .collect();
    tau2 * (1.0 - c.quad(&k))
}

/// IMSE of a one-dimensional latent design by adaptive Simpson quadrature.
pub fn imse_quadrature_1d(
    wn1: &DMatrix<f64>,
    theta: f64,
    g: f64,
    tau2: f64,
    a: f64,
    b: f64,
    tol: f64,
) -> f64 {
    assert_eq!(wn1.ncols(), 1);
    let c = DenseSystem::new(&nugget_cov(wn1, theta, g));
    let f = |w: f64| mean_variance_at(wn1, &c, &[w], theta, tau2);
    // split at every design point so the integrand is smooth on each panel
    let mut knots: Vec<f64> = wn1.iter().copied().filter(|&w| w > a && w < b).collect();
    knots.push(a);
    knots.push(b);
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    knots
        .windows(2)
        .map(|ab| adaptive_simpson(&f, ab[0], ab[1], tol, 50))
        .sum()
}

pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = 0.5 * (a + b);
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_rec(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let (d, e) = (0.5 * (a + c), 0.5 * (c + b));
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, c, fa, fc, fd, left, tol / 2.0, depth - 1)
        + simpson_rec(f, c, b, fc, fb, fe, right, tol / 2.0, depth - 1)
}

/// IMSE by plain Monte Carlo over the box `[lo, hi]`.
pub fn imse_monte_carlo<R: Rng + ?Sized>(
    wn1: &DMatrix<f64>,
    theta: f64,
    g: f64,
    tau2: f64,
    lo: &[f64],
    hi: &[f64],
    samples: usize,
    rng: &mut R,
) -> f64 {
    // sampling error (~1e-3) swamps rounding here, so a plain inverse will do
    let cinv = gauss_jordan_inverse(&nugget_cov(wn1, theta, g));
    let design: Vec<Vec<f64>> = (0..wn1.nrows()).map(|i| row(wn1, i)).collect();
    let volume: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
    let mut w = vec![0.0; lo.len()];
    let mut k = DVector::zeros(design.len());
    let mut acc = 0.0;
    for _ in 0..samples {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = rng.random_range(lo[i]..hi[i]);
        }
        for (ki, xi) in k.iter_mut().zip(&design) {
            *ki = (-sq_dist_rows(xi, &w) / theta).exp();
        }
        acc += tau2 * (1.0 - k.dot(&(&cinv * &k)));
    }
    volume * acc / samples as f64
}

/// Standard normal CDF by Simpson integration of the density from 0.
pub fn normal_cdf_by_quadrature(x: f64) -> f64 {
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 + adaptive_simpson(&pdf, 0.0, x, 1e-14, 40)
}

/// Regularized lower incomplete gamma `P(shape, rate·x)` by quadrature of
/// the density.
pub fn gamma_cdf_by_quadrature(x: f64, shape: f64, rate: f64) -> f64 {
    let norm = statrs::function::gamma::gamma(shape);
    let pdf = |t: f64| {
        if t <= 0.0 {
            0.0
        } else {
            rate.powf(shape) * t.powf(shape - 1.0) * (-rate * t).exp() / norm
        }
    };
    adaptive_simpson(&pdf, 0.0, x, 1e-12, 50)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot2_survives_cancellation() {
        let a = [1e16, 1.0, -1e16];
        let b = [1.0, 1.0, 1.0];
        assert_eq!(dot2(&a, &b), 1.0);
        let x = 1.0 + f64::EPSILON;
        // x² − (1 + 2ε) = ε² exactly
        assert_eq!(dot2(&[x, -1.0], &[x, 1.0 + 2.0 * f64::EPSILON]), f64::EPSILON * f64::EPSILON);
    }

    #[test]
    fn refined_solve_on_hilbert() {
        // Hilbert matrix of order 8 (condition ~1e10) with a known solution
        let n = 8;
        let h = DMatrix::from_fn(n, n, |i, j| 1.0 / (i + j + 1) as f64);
        let x_true: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| dot2(&row(&h, i), &x_true)).collect();
        let sys = DenseSystem::new(&h);
        let plain = &sys.inv * DVector::from_column_slice(&b);
        let refined = sys.solve(&b);
        let err = |x: &[f64]| x.iter().zip(&x_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err(&refined) < err(plain.as_slice()));
    }

    #[test]
    fn gauss_jordan_and_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(6, &mut rng);
        let inv = gauss_jordan_inverse(&a);
        assert!((&a * &inv - DMatrix::identity(6, 6)).norm() < 1e-12);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 3.0, 1.0]);
        assert_eq!(determinant(&d), -6.0);
    }
}
