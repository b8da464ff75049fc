//! Active-learning criteria over a candidate set, evaluated in latent space
//! for every retained iteration and averaged.
//!
//! IMSE integrates the predictive variance of the mean over a uniform box in
//! latent coordinates; ALC sums the variance reduction a candidate induces
//! over a reference set. Both extend a precomputed `C_n⁻¹` by one row and
//! column per candidate instead of refactoring.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, input_header, write_row};
use crate::dgp::{map_state, FittedModel, LatentMode};
use crate::error::{Error, Result};
use crate::kernel::{cov_from_dist, cross_cov, sq_dist_self, Design, KernelParams};
use crate::linalg::{cholesky_jittered, extend_inverse, CholFactor, PartitionedInverse, DEGENERATE_TOL};
use crate::sampler::ChainState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Imse,
    Alc,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imse" => Ok(Criterion::Imse),
            "alc" => Ok(Criterion::Alc),
            _ => Err(Error::Config(format!("criterion must be alc or imse, got '{s}'"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Imse => "imse",
            Criterion::Alc => "alc",
        })
    }
}

impl Criterion {
    /// Value a candidate gets when its update is numerically degenerate.
    pub fn penalty(self) -> f64 {
        match self {
            Criterion::Imse => f64::INFINITY,
            Criterion::Alc => f64::NEG_INFINITY,
        }
    }

    /// Whether `a` is strictly preferable to `b`. NaN is never preferred.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Criterion::Imse => a < b,
            Criterion::Alc => a > b,
        }
    }
}

/// Integration box in latent coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Half-width used to open up a zero-width latent column.
const MIN_HALF_WIDTH: f64 = 1e-6;

impl Bounds {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::mismatch("bounds", a.len(), b.len()));
        }
        if a.iter().zip(&b).any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Domain("bounds need a_i < b_i".into()));
        }
        Ok(Self { a, b })
    }

    /// Column-wise extent of the union of two latent designs. A column with
    /// zero extent is widened symmetrically.
    pub fn covering(first: &Design, second: &Design) -> Result<Self> {
        if first.ncols() != second.ncols() {
            return Err(Error::mismatch("bounds columns", first.ncols(), second.ncols()));
        }
        let p = first.ncols();
        let mut a = Vec::with_capacity(p);
        let mut b = Vec::with_capacity(p);
        for j in 0..p {
            let (c1, c2) = (first.column(j), second.column(j));
            let (lo, hi) = c1.iter().chain(c2.iter()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let pad = if hi > lo { 0.0 } else { MIN_HALF_WIDTH * lo.abs().max(1.0) };
            a.push(lo - pad);
            b.push(hi + pad);
        }
        Self::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn volume(&self) -> f64 {
        self.a.iter().zip(&self.b).map(|(a, b)| b - a).product()
    }
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ(hi) − Φ(lo)`, taken on the lower tail when both arguments are positive
/// so the difference does not cancel.
fn phi_diff(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        phi(-lo) - phi(-hi)
    } else {
        phi(hi) - phi(lo)
    }
}

/// One entry of `H = ∫ k(w, w_j) k(w, w_k) dw` over the box.
pub fn h_entry(wj: &[f64], wk: &[f64], theta: f64, bounds: &Bounds) -> f64 {
    let s = theta.sqrt();
    let mut out = (std::f64::consts::PI * theta / 2.0).powf(bounds.dim() as f64 / 2.0);
    for i in 0..bounds.dim() {
        let (diff, sum) = (wj[i] - wk[i], wj[i] + wk[i]);
        out *= (-diff * diff / (2.0 * theta)).exp()
            * phi_diff((2.0 * bounds.a[i] - sum) / s, (2.0 * bounds.b[i] - sum) / s);
    }
    out
}

fn rows(m: &Design) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn h_matrix(w: &Design, theta: f64, bounds: &Bounds) -> DMatrix<f64> {
    let r = rows(w);
    let n = r.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..=j {
            let v = h_entry(&r[j], &r[k], theta, bounds);
            h[(j, k)] = v;
            h[(k, j)] = v;
        }
    }
    h
}

fn check_bounds(w: &Design, bounds: &Bounds) -> Result<()> {
    if w.ncols() != bounds.dim() {
        return Err(Error::mismatch("imse bounds", w.ncols(), bounds.dim()));
    }
    Ok(())
}

/// Closed-form IMSE of a complete design by direct factorization:
/// `τ̂² [Π(b_i − a_i) − tr(C⁻¹ H)]`. `H` holds raw integrals over the box, so
/// the expectation under the uniform measure is `tr(C⁻¹ H) / Π(b_i − a_i)`.
pub fn imse(w: &Design, theta_y: f64, g: f64, tau2hat: f64, bounds: &Bounds) -> Result<f64> {
    check_bounds(w, bounds)?;
    let c = cov_from_dist(&sq_dist_self(w), &KernelParams::new(theta_y, 1.0, g)?);
    let cinv = cholesky_jittered(&c)?.inverse();
    let h = h_matrix(w, theta_y, bounds);
    Ok(tau2hat * (bounds.volume() - cinv.component_mul(&h).sum()))
}

/// Everything about one iteration that does not depend on the candidate.
#[derive(Clone, Debug)]
pub struct AcqPrecompute {
    pub wn: Vec<Vec<f64>>,
    chol: CholFactor,
    pub cn_inv: DMatrix<f64>,
    pub theta_y: f64,
    pub g: f64,
    pub tau2hat: f64,
    imse_part: Option<ImsePart>,
    alc_part: Option<AlcPart>,
}

#[derive(Clone, Debug)]
struct ImsePart {
    bounds: Bounds,
    h_base: DMatrix<f64>,
    /// `tr(C_n⁻¹ H_base)`.
    base_trace: f64,
}

#[derive(Clone, Debug)]
struct AlcPart {
    wref: Vec<Vec<f64>>,
    /// `L⁻¹ k_n(w)` for every reference point, one column each, with
    /// `C_n = L Lᵀ`.
    uref: DMatrix<f64>,
}

impl AcqPrecompute {
    pub fn new(wn: &Design, theta_y: f64, g: f64, tau2hat: f64) -> Result<Self> {
        let c = cov_from_dist(&sq_dist_self(wn), &KernelParams::new(theta_y, 1.0, g)?);
        let chol = cholesky_jittered(&c)?;
        Ok(Self {
            wn: rows(wn),
            cn_inv: chol.inverse(),
            chol,
            theta_y,
            g,
            tau2hat,
            imse_part: None,
            alc_part: None,
        })
    }

    pub fn for_state(wn: &Design, state: &ChainState) -> Result<Self> {
        Self::new(wn, state.theta_y, state.g, state.tau2hat)
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Result<Self> {
        if bounds.dim() != self.p() {
            return Err(Error::mismatch("imse bounds", self.p(), bounds.dim()));
        }
        let h_base = DMatrix::from_fn(self.n(), self.n(), |j, k| {
            h_entry(&self.wn[j], &self.wn[k], self.theta_y, &bounds)
        });
        let base_trace = self.cn_inv.component_mul(&h_base).sum();
        self.imse_part = Some(ImsePart {
            bounds,
            h_base,
            base_trace,
        });
        Ok(self)
    }

    pub fn with_reference(mut self, wref: &Design) -> Result<Self> {
        if wref.ncols() != self.p() && wref.nrows() > 0 {
            return Err(Error::mismatch("reference columns", self.p(), wref.ncols()));
        }
        let wn = Design::from_fn(self.n(), self.p(), |i, j| self.wn[i][j]);
        let uref = if wref.nrows() == 0 {
            DMatrix::zeros(self.n(), 0)
        } else {
            self.chol.half_solve_mat(&cross_cov(&wn, wref, self.theta_y)?)?
        };
        self.alc_part = Some(AlcPart {
            wref: rows(wref),
            uref,
        });
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.wn.len()
    }

    pub fn p(&self) -> usize {
        self.wn.first().map_or(0, Vec::len)
    }

    fn corr(&self, a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d / self.theta_y).exp()
    }

    fn extend(&self, w: &[f64]) -> Result<PartitionedInverse> {
        if w.len() != self.p() {
            return Err(Error::mismatch("candidate columns", self.p(), w.len()));
        }
        let k = DVector::from_iterator(self.n(), self.wn.iter().map(|r| self.corr(r, w)));
        extend_inverse(&self.cn_inv, &k, 1.0 + self.g)
    }

    /// IMSE of the design extended by `w`, via the partitioned inverse and
    /// only the new row and column of `H`.
    pub fn imse(&self, w: &[f64]) -> Result<f64> {
        let part = self
            .imse_part
            .as_ref()
            .ok_or_else(|| Error::Domain("IMSE precompute needs bounds".into()))?;
        let PartitionedInverse { v, h } = self.extend(w)?;
        let hcol = DVector::from_iterator(
            self.n(),
            self.wn.iter().map(|r| h_entry(r, w, self.theta_y, &part.bounds)),
        );
        let hcorner = h_entry(w, w, self.theta_y, &part.bounds);
        let trace = part.base_trace + v * h.dot(&(&part.h_base * &h)) + 2.0 * h.dot(&hcol) + hcorner / v;
        Ok(self.tau2hat * (part.bounds.volume() - trace))
    }

    /// Variance reduction over the reference set from adding `w`:
    /// `Σ τ̂² [v (hᵀk)² + 2 z hᵀk + z²/v]` with `z` the candidate-reference
    /// correlation.
    ///
    /// Evaluated through the Cholesky factor as the equal
    /// `Σ τ̂² (z − u_wᵀ u_r)² / v` with `u = L⁻¹ k` and `v = 1 + g − u_wᵀu_w`.
    /// The three terms above are each far larger than their sum near
    /// existing data, and `C⁻¹` loses twice the digits `L⁻¹` does.
    pub fn alc(&self, w: &[f64]) -> Result<f64> {
        let part = self
            .alc_part
            .as_ref()
            .ok_or_else(|| Error::Domain("ALC precompute needs a reference set".into()))?;
        if part.wref.is_empty() {
            return Ok(0.0);
        }
        if w.len() != self.p() {
            return Err(Error::mismatch("candidate columns", self.p(), w.len()));
        }
        let k = DVector::from_iterator(self.n(), self.wn.iter().map(|r| self.corr(r, w)));
        let u = self.chol.half_solve(&k)?;
        let v = 1.0 + self.g - u.norm_squared();
        if v <= DEGENERATE_TOL {
            return Err(Error::DegenerateUpdate { v });
        }
        let a = part.uref.tr_mul(&u);
        let total: f64 = part
            .wref
            .iter()
            .zip(a.iter())
            .map(|(r, &a)| {
                let d = self.corr(w, r) - a;
                d * d / v
            })
            .sum();
        Ok(self.tau2hat * total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcqResult {
    /// Criterion averaged over retained iterations, one per candidate.
    pub values: Vec<f64>,
    pub chosen: usize,
    pub criterion: Criterion,
}

/// Index of the best value, lowest index on ties; NaN never wins.
pub fn select(values: &[f64], criterion: Criterion) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if criterion.better(v, values[best]) || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Criterion values for one iteration; degenerate candidates get the penalty.
pub fn state_values(
    w_train: &Design,
    state: &ChainState,
    w_cand: &Design,
    criterion: Criterion,
) -> Result<Vec<f64>> {
    let pre = AcqPrecompute::for_state(w_train, state)?;
    let pre = match criterion {
        Criterion::Imse => pre.with_bounds(Bounds::covering(w_train, w_cand)?)?,
        Criterion::Alc => pre.with_reference(w_cand)?,
    };
    w_cand
        .row_iter()
        .map(|r| {
            let w: Vec<f64> = r.iter().copied().collect();
            let value = match criterion {
                Criterion::Imse => pre.imse(&w),
                Criterion::Alc => pre.alc(&w),
            };
            match value {
                Err(Error::DegenerateUpdate { .. }) => Ok(criterion.penalty()),
                other => other,
            }
        })
        .collect()
}

/// Maps candidates through every retained iteration by their conditional
/// mean, scores them there (reference set = mapped candidates; IMSE box =
/// extent of training and candidate latents), and averages over iterations.
pub fn evaluate_candidates<R: Rng + ?Sized>(
    model: &FittedModel,
    xcand: &Design,
    criterion: Criterion,
    _rng: &mut R,
) -> Result<AcqResult> {
    if xcand.nrows() == 0 {
        return Err(Error::Domain("candidate set is empty".into()));
    }
    if xcand.ncols() != model.data.d() {
        return Err(Error::mismatch("candidate columns", model.data.d(), xcand.ncols()));
    }
    let x = &model.data.x;
    let per_t: Vec<Vec<f64>> = model
        .trace
        .states
        .par_iter()
        .map(|s| {
            let (w_cand, _) = map_state(x, s, xcand, LatentMode::Mean, None)?;
            state_values(s.outer_inputs(x), s, &w_cand, criterion)
        })
        .collect::<Result<_>>()?;
    let t_len = per_t.len() as f64;
    let mut values = vec![0.0; xcand.nrows()];
    for vals in &per_t {
        for (acc, v) in values.iter_mut().zip(vals) {
            *acc += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= t_len);
    Ok(AcqResult {
        chosen: select(&values, criterion),
        values,
        criterion,
    })
}

/// Candidate coordinates with their averaged criterion, one row each.
pub fn write_surface<W: Write>(out: &mut W, xcand: &Design, result: &AcqResult) -> Result<()> {
    let mut header = input_header(xcand.ncols());
    header.push(result.criterion.to_string());
    writeln!(out, "{}", header.join(","))?;
    for (i, v) in result.values.iter().enumerate() {
        write_row(out, xcand.row(i).iter().copied().chain([*v]))?;
    }
    Ok(())
}

/// Single-row file with the chosen candidate, its index and value.
pub fn write_choice<W: Write>(out: &mut W, xcand: &Design, result: &AcqResult) -> Result<()> {
    let mut header = vec!["index".to_string()];
    header.extend(input_header(xcand.ncols()));
    header.push(result.criterion.to_string());
    writeln!(out, "{}", header.join(","))?;
    let mut row = vec![result.chosen.to_string()];
    row.extend(xcand.row(result.chosen).iter().map(|&v| fmt_f64(v)));
    row.push(fmt_f64(result.values[result.chosen]));
    writeln!(out, "{}", row.join(","))?;
    Ok(())
}
