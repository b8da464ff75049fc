//! Single-layer GP pieces shared by every layer: profiled and latent
//! marginal likelihoods, and conditional predictive moments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{cov_from_dist, cross_cov, sq_dist_self, Design, KernelParams};
use crate::linalg::{cholesky_jittered, CholFactor};

/// Log-likelihood with the scale integrated out, and the implied scale
/// estimate `τ̂² = Yᵀ(K + gI)⁻¹Y / n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfiledLik {
    pub loglik: f64,
    pub tau2hat: f64,
}

/// Pointwise or full Gaussian predictive moments.
#[derive(Clone, Debug)]
pub struct PredictiveMoments {
    pub mean: DVector<f64>,
    /// Always populated; the diagonal of `cov` in full mode.
    pub var: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
    /// Degrees of freedom of the Student-t this Gaussian approximates.
    pub dof: usize,
}

/// Outer-layer likelihood from a precomputed distance matrix; also returns
/// the factor of `K_θ(W) + gI` for reuse.
pub fn outer_loglik_from_dist(
    y: &DVector<f64>,
    dist: &DMatrix<f64>,
    theta_y: f64,
    g: f64,
) -> Result<(ProfiledLik, CholFactor)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Domain("outer likelihood needs n >= 1".into()));
    }
    if dist.nrows() != n {
        return Err(Error::mismatch("outer_loglik rows", n, dist.nrows()));
    }
    let c = cov_from_dist(dist, &KernelParams::new(theta_y, 1.0, g)?);
    let chol = cholesky_jittered(&c)?;
    let quad = chol.quad_form(y)?;
    let nf = n as f64;
    let tau2hat = quad / nf;
    let loglik = -0.5 * nf * quad.ln() - 0.5 * chol.logdet();
    Ok((ProfiledLik { loglik, tau2hat }, chol))
}

pub fn outer_loglik(y: &DVector<f64>, w: &Design, theta_y: f64, g: f64) -> Result<ProfiledLik> {
    if w.nrows() != y.len() {
        return Err(Error::mismatch("outer_loglik rows", y.len(), w.nrows()));
    }
    outer_loglik_from_dist(y, &sq_dist_self(w), theta_y, g).map(|(l, _)| l)
}

/// One unit-scale, noiseless node term `−½ log|K| − ½ wᵀK⁻¹w`, with the factor
/// of `K` (which doubles as the node's prior factor).
pub fn node_loglik_from_dist(
    w: &DVector<f64>,
    dist: &DMatrix<f64>,
    theta: f64,
) -> Result<(f64, CholFactor)> {
    if dist.nrows() != w.len() {
        return Err(Error::mismatch("node_loglik rows", w.len(), dist.nrows()));
    }
    let k = cov_from_dist(dist, &KernelParams::latent(theta)?);
    let chol = cholesky_jittered(&k)?;
    let ll = node_loglik_with(w, &chol)?;
    Ok((ll, chol))
}

/// Node term for a known prior factor.
pub fn node_loglik_with(w: &DVector<f64>, chol: &CholFactor) -> Result<f64> {
    Ok(-0.5 * chol.logdet() - 0.5 * chol.quad_form(w)?)
}

/// Sum of independent node terms `Σ_i log L(W_i | Z, θ_w[i])`.
pub fn latent_loglik(w: &Design, z: &Design, theta_w: &[f64]) -> Result<f64> {
    if w.ncols() != theta_w.len() {
        return Err(Error::mismatch("latent_loglik nodes", w.ncols(), theta_w.len()));
    }
    if w.nrows() != z.nrows() {
        return Err(Error::mismatch("latent_loglik rows", z.nrows(), w.nrows()));
    }
    let dist = sq_dist_self(z);
    theta_w.iter().enumerate().try_fold(0.0, |acc, (i, &theta)| {
        let col = w.column(i).into_owned();
        Ok(acc + node_loglik_from_dist(&col, &dist, theta)?.0)
    })
}

/// Predictive moments of a zero-mean GP at `xtest` given `(xtrain, ytrain)`.
///
/// The training side always carries the nugget; `noise_free_test` drops it
/// from the test block only, giving moments of the latent mean.
pub fn conditional_moments(
    ytrain: &DVector<f64>,
    xtrain: &Design,
    xtest: &Design,
    p: &KernelParams,
    noise_free_test: bool,
    pointwise: bool,
) -> Result<PredictiveMoments> {
    if xtrain.nrows() != ytrain.len() {
        return Err(Error::mismatch("conditional_moments rows", ytrain.len(), xtrain.nrows()));
    }
    let c = cov_from_dist(&sq_dist_self(xtrain), &KernelParams::new(p.theta, 1.0, p.g)?);
    let chol = cholesky_jittered(&c)?;
    let cross = cross_cov(xtest, xtrain, p.theta)?;
    moments_from_parts(ytrain, &chol, &cross, || cross_cov(xtest, xtest, p.theta), p, noise_free_test, pointwise)
}

/// Shared tail of the predictive equations once `C = K + gI` is factored and
/// the test/train cross-correlation is known. `test_block` is only invoked in
/// full-covariance mode.
pub(crate) fn moments_from_parts<F>(
    ytrain: &DVector<f64>,
    chol: &CholFactor,
    cross: &DMatrix<f64>,
    test_block: F,
    p: &KernelParams,
    noise_free_test: bool,
    pointwise: bool,
) -> Result<PredictiveMoments>
where
    F: FnOnce() -> Result<DMatrix<f64>>,
{
    let alpha = chol.solve_vec(ytrain)?;
    let mean = cross * &alpha;
    let half = chol.half_solve_mat(&cross.transpose())?;
    let test_nugget = if noise_free_test { 0.0 } else { p.g };
    let m = cross.nrows();
    if pointwise {
        let var = DVector::from_fn(m, |j, _| {
            let reduction = half.column(j).norm_squared();
            (p.tau2 * (1.0 + test_nugget - reduction)).max(0.0)
        });
        return Ok(PredictiveMoments {
            mean,
            var,
            cov: None,
            dof: ytrain.len(),
        });
    }
    let mut cov = test_block()? - half.transpose() * &half;
    for j in 0..m {
        cov[(j, j)] += test_nugget;
    }
    cov *= p.tau2;
    let cov = (&cov + cov.transpose()) * 0.5;
    let var = DVector::from_fn(m, |j, _| cov[(j, j)].max(0.0));
    Ok(PredictiveMoments {
        mean,
        var,
        cov: Some(cov),
        dof: ytrain.len(),
    })
}
