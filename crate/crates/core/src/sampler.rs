//! Metropolis-within-Gibbs with elliptical slice sampling for latent layers.
//!
//! Scalars (`g`, `θ_y`, `θ_w[i]`, `θ_z[i]`) move by sliding-window
//! Metropolis-Hastings under Gamma(3/2, b) priors; latent node vectors move
//! by elliptical slice sampling against the likelihood component that
//! receives them as inputs. A sweep updates, in order: `g`, `θ_y`, each
//! `θ_w[i]`, each `θ_z[i]`, each `W_i`, each `Z_i`. Two layers drop `θ_z`/`Z`
//! and read `Z ≡ X`; one layer samples `g` and `θ` only.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, read_table, Dataset};
use crate::error::{Error, Result};
use crate::gp::{node_loglik_from_dist, node_loglik_with, outer_loglik_from_dist, ProfiledLik};
use crate::kernel::{sq_dist_self, Design};
use crate::linalg::CholFactor;

/// Nugget floor for deterministic (interpolating) fits: `sqrt(f64::EPSILON)`.
pub fn nugget_floor() -> f64 {
    f64::EPSILON.sqrt()
}

/// Gamma prior with shape fixed at 3/2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub shape: f64,
    pub rate: f64,
}

impl PriorSpec {
    pub const SHAPE: f64 = 1.5;

    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Domain(format!("prior rate must be positive, got {rate}")));
        }
        Ok(Self {
            shape: Self::SHAPE,
            rate,
        })
    }
}

/// Multiplicative uniform window `Unif(l·θ/u, u·θ/l)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub l: f64,
    pub u: f64,
}

impl Default for ProposalSpec {
    fn default() -> Self {
        Self { l: 1.0, u: 2.0 }
    }
}

impl ProposalSpec {
    pub fn new(l: f64, u: f64) -> Result<Self> {
        if !(l > 0.0 && l < u && u.is_finite()) {
            return Err(Error::Domain(format!("proposal window needs 0 < l < u, got l={l} u={u}")));
        }
        Ok(Self { l, u })
    }
}

/// Log Gamma density up to its normalizing constant.
pub fn gamma_log_prior(x: f64, prior: &PriorSpec) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("gamma prior evaluated at {x}")));
    }
    Ok((prior.shape - 1.0) * x.ln() - prior.rate * x)
}

/// Draws `θ⋆` from the sliding window around `prev`; returns it with the
/// log proposal ratio `log(prev/θ⋆)`.
pub fn propose_window<R: Rng + ?Sized>(prev: f64, spec: &ProposalSpec, rng: &mut R) -> (f64, f64) {
    let lo = spec.l * prev / spec.u;
    let hi = spec.u * prev / spec.l;
    let star = lo + (hi - lo) * rng.random::<f64>();
    (star, prev.ln() - star.ln())
}

#[derive(Clone, Debug)]
pub struct MhOutcome<T> {
    pub value: f64,
    pub loglik: f64,
    pub accepted: bool,
    /// Whatever the likelihood evaluation produced for the accepted value.
    pub payload: Option<T>,
}

/// One Metropolis-Hastings update of a positive scalar. `loglik_fn` may return
/// a non-finite value to veto a proposal.
pub fn mh_update_scalar<R, F>(
    current: f64,
    current_loglik: f64,
    mut loglik_fn: F,
    prior: &PriorSpec,
    spec: &ProposalSpec,
    rng: &mut R,
) -> Result<MhOutcome<()>>
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> Result<f64>,
{
    mh_update_with(current, current_loglik, |x| Ok((loglik_fn(x)?, ())), prior, spec, rng)
}

/// [`mh_update_scalar`] for likelihoods that carry reusable by-products.
pub fn mh_update_with<R, F, T>(
    current: f64,
    current_loglik: f64,
    mut loglik_fn: F,
    prior: &PriorSpec,
    spec: &ProposalSpec,
    rng: &mut R,
) -> Result<MhOutcome<T>>
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> Result<(f64, T)>,
{
    let (star, log_q) = propose_window(current, spec, rng);
    let u: f64 = rng.random();
    let reject = MhOutcome {
        value: current,
        loglik: current_loglik,
        accepted: false,
        payload: None,
    };
    let (ll_star, payload) = loglik_fn(star)?;
    if !ll_star.is_finite() {
        return Ok(reject);
    }
    let log_alpha = ll_star - current_loglik + gamma_log_prior(star, prior)?
        - gamma_log_prior(current, prior)?
        + log_q;
    if u.ln() < log_alpha {
        Ok(MhOutcome {
            value: star,
            loglik: ll_star,
            accepted: true,
            payload: Some(payload),
        })
    } else {
        Ok(reject)
    }
}

#[derive(Clone, Debug)]
pub struct EssOutcome<T> {
    pub f: DVector<f64>,
    pub loglik: f64,
    /// Number of bracket shrinks before acceptance.
    pub shrinks: usize,
    /// `None` when the bracket collapsed back onto the previous state.
    pub payload: Option<T>,
}

/// Width below which the angle bracket is considered collapsed onto `γ = 0`.
const BRACKET_FLOOR: f64 = 1e-12;

/// Elliptical slice sampling update of `f_prev` under prior `N(0, L Lᵀ)`.
///
/// Proposals with non-finite likelihood count as rejections. The loop ends
/// on the first accepted angle, or returns `f_prev` once the bracket has
/// collapsed onto zero.
pub fn ess_update<R, F, T>(
    f_prev: &DVector<f64>,
    current_loglik: f64,
    prior_chol: &CholFactor,
    mut loglik_fn: F,
    rng: &mut R,
) -> Result<EssOutcome<T>>
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> Result<(f64, T)>,
{
    let n = f_prev.len();
    if prior_chol.dim() != n {
        return Err(Error::mismatch("ess prior", n, prior_chol.dim()));
    }
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f_prior = prior_chol.lower_mul(&z);
    let threshold = current_loglik + rng.random::<f64>().ln();

    let mut gamma = 2.0 * PI * rng.random::<f64>();
    let (mut lo, mut hi) = (gamma - 2.0 * PI, gamma);
    let mut shrinks = 0;
    loop {
        let star = f_prev * gamma.cos() + &f_prior * gamma.sin();
        let (ll, payload) = loglik_fn(&star)?;
        if ll.is_finite() && ll > threshold {
            return Ok(EssOutcome {
                f: star,
                loglik: ll,
                shrinks,
                payload: Some(payload),
            });
        }
        shrinks += 1;
        if gamma < 0.0 {
            lo = gamma;
        } else {
            hi = gamma;
        }
        if hi - lo < BRACKET_FLOOR {
            return Ok(EssOutcome {
                f: f_prev.clone(),
                loglik: current_loglik,
                shrinks,
                payload: None,
            });
        }
        gamma = lo + (hi - lo) * rng.random::<f64>();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Layers {
    One,
    Two,
    Three,
}

impl Layers {
    pub fn count(self) -> u8 {
        match self {
            Layers::One => 1,
            Layers::Two => 2,
            Layers::Three => 3,
        }
    }
}

impl TryFrom<u8> for Layers {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Layers::One),
            2 => Ok(Layers::Two),
            3 => Ok(Layers::Three),
            _ => Err(format!("layers must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Layers> for u8 {
    fn from(l: Layers) -> u8 {
        l.count()
    }
}

/// Gamma rates for each hyperparameter family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub g: PriorSpec,
    pub theta_y: PriorSpec,
    pub theta_w: PriorSpec,
    pub theta_z: PriorSpec,
}

impl PriorSet {
    /// Rates chosen for inputs coded to the unit cube and responses scaled to
    /// unit variance.
    pub fn defaults(layers: Layers) -> Self {
        let b = |r: f64| PriorSpec {
            shape: PriorSpec::SHAPE,
            rate: r,
        };
        let (theta_y, theta_w, theta_z) = match layers {
            Layers::One => (3.9 / 1.5, 3.9 / 4.0, 3.9 / 4.0),
            Layers::Two => (3.9 / 6.0, 3.9 / 4.0, 3.9 / 4.0),
            Layers::Three => (3.9 / 6.0, 3.9 / 12.0, 3.9 / 4.0),
        };
        Self {
            g: b(3.9),
            theta_y: b(theta_y),
            theta_w: b(theta_w),
            theta_z: b(theta_z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub layers: Layers,
    /// Fix `g` at the nugget floor and never update it.
    pub deterministic: bool,
    pub priors: PriorSet,
    pub proposal: ProposalSpec,
}

impl SamplerConfig {
    pub fn new(layers: Layers) -> Self {
        Self {
            layers,
            deterministic: false,
            priors: PriorSet::defaults(layers),
            proposal: ProposalSpec::default(),
        }
    }
}

/// One Gibbs state. `w` is absent for one layer (the outer layer reads `X`);
/// `z` and `theta_z` are only present for three layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub iteration: usize,
    pub g: f64,
    pub theta_y: f64,
    pub theta_w: Vec<f64>,
    pub theta_z: Vec<f64>,
    pub w: Option<Design>,
    pub z: Option<Design>,
    pub tau2hat: f64,
}

impl ChainState {
    pub fn p(&self) -> usize {
        self.w.as_ref().map_or(0, |w| w.ncols())
    }

    /// Inputs the outer layer sees at this state.
    pub fn outer_inputs<'a>(&'a self, x: &'a Design) -> &'a Design {
        self.w.as_ref().unwrap_or(x)
    }

    /// Inputs the `W` layer is conditioned on.
    pub fn w_inputs<'a>(&'a self, x: &'a Design) -> &'a Design {
        self.z.as_ref().unwrap_or(x)
    }

    fn check(&self, layers: Layers, n: usize) -> Result<()> {
        let ok = match layers {
            Layers::One => self.w.is_none() && self.z.is_none(),
            Layers::Two => {
                self.z.is_none()
                    && self.w.as_ref().is_some_and(|w| w.nrows() == n && w.ncols() == self.theta_w.len())
            }
            Layers::Three => {
                let p = self.theta_w.len();
                self.w.as_ref().is_some_and(|w| w.nrows() == n && w.ncols() == p)
                    && self.z.as_ref().is_some_and(|z| z.nrows() == n && z.ncols() == p)
                    && self.theta_z.len() == p
            }
        };
        let positive = self.g > 0.0
            && self.theta_y > 0.0
            && self.theta_w.iter().chain(&self.theta_z).all(|&t| t > 0.0);
        if ok && positive {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "initial state inconsistent with a {}-layer model on n = {n}",
                layers.count()
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub proposed: usize,
    pub accepted: usize,
}

impl Tally {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += usize::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EssTally {
    pub calls: usize,
    pub shrinks: usize,
    pub max_shrinks: usize,
}

impl EssTally {
    fn record(&mut self, shrinks: usize) {
        self.calls += 1;
        self.shrinks += shrinks;
        self.max_shrinks = self.max_shrinks.max(shrinks);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tallies {
    pub g: Tally,
    pub theta_y: Tally,
    pub theta_w: Vec<Tally>,
    pub theta_z: Vec<Tally>,
    pub ess_w: EssTally,
    pub ess_z: EssTally,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceMeta {
    /// Sweeps performed.
    pub iterations: usize,
    pub seed: Option<u64>,
    pub burn: usize,
    pub thin: usize,
    pub tallies: Tallies,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub states: Vec<ChainState>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&ChainState> {
        self.states.last()
    }
}

/// Drops the first `burn` states and keeps every `thin`-th one after.
pub fn trim(trace: &Trace, burn: usize, thin: usize) -> Result<Trace> {
    if thin == 0 {
        return Err(Error::Domain("thin must be at least 1".into()));
    }
    if burn >= trace.len() {
        return Err(Error::EmptyTrace);
    }
    let states = trace.states[burn..].iter().step_by(thin).cloned().collect();
    let mut meta = trace.meta.clone();
    meta.burn += burn;
    meta.thin = meta.thin.max(1) * thin;
    Ok(Trace { states, meta })
}

struct NodeCache {
    loglik: f64,
    chol: CholFactor,
}

fn node_caches(m: &Design, dist: &DMatrix<f64>, thetas: &[f64]) -> Result<Vec<NodeCache>> {
    thetas
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let (loglik, chol) = node_loglik_from_dist(&m.column(i).into_owned(), dist, theta)?;
            Ok(NodeCache { loglik, chol })
        })
        .collect()
}

fn with_column(m: &Design, i: usize, col: &DVector<f64>) -> Design {
    let mut out = m.clone();
    out.set_column(i, col);
    out
}

/// Live chain with cached likelihood terms. Each cached term is refreshed
/// only when one of its inputs changes.
struct Chain<'a> {
    cfg: &'a SamplerConfig,
    y: &'a DVector<f64>,
    dist_x: DMatrix<f64>,
    state: ChainState,
    dist_outer: DMatrix<f64>,
    outer: ProfiledLik,
    dist_z: Option<DMatrix<f64>>,
    w_nodes: Vec<NodeCache>,
    z_nodes: Vec<NodeCache>,
    tallies: Tallies,
}

impl<'a> Chain<'a> {
    fn new(cfg: &'a SamplerConfig, data: &'a Dataset, mut state: ChainState) -> Result<Self> {
        state.check(cfg.layers, data.n())?;
        if cfg.deterministic {
            state.g = nugget_floor();
        }
        let dist_x = sq_dist_self(&data.x);
        let dist_outer = match &state.w {
            Some(w) => sq_dist_self(w),
            None => dist_x.clone(),
        };
        let (outer, _) = outer_loglik_from_dist(&data.y, &dist_outer, state.theta_y, state.g)?;
        state.tau2hat = outer.tau2hat;
        let dist_z = state.z.as_ref().map(sq_dist_self);
        let w_nodes = match &state.w {
            Some(w) => node_caches(w, dist_z.as_ref().unwrap_or(&dist_x), &state.theta_w)?,
            None => Vec::new(),
        };
        let z_nodes = match &state.z {
            Some(z) => node_caches(z, &dist_x, &state.theta_z)?,
            None => Vec::new(),
        };
        let tallies = Tallies {
            theta_w: vec![Tally::default(); w_nodes.len()],
            theta_z: vec![Tally::default(); z_nodes.len()],
            ..Tallies::default()
        };
        Ok(Self {
            cfg,
            y: &data.y,
            dist_x,
            state,
            dist_outer,
            outer,
            dist_z,
            w_nodes,
            z_nodes,
            tallies,
        })
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let cfg = self.cfg;
        let y = self.y;
        let floor = nugget_floor();

        if !cfg.deterministic {
            let (dist, theta_y) = (&self.dist_outer, self.state.theta_y);
            let out = mh_update_with(
                self.state.g,
                self.outer.loglik,
                |g| {
                    if g < floor {
                        return Ok((f64::NEG_INFINITY, None));
                    }
                    Ok(outer_loglik_from_dist(y, dist, theta_y, g)
                        .map_or((f64::NEG_INFINITY, None), |(l, _)| (l.loglik, Some(l))))
                },
                &cfg.priors.g,
                &cfg.proposal,
                rng,
            )?;
            self.tallies.g.record(out.accepted);
            if let Some(Some(lik)) = out.payload {
                self.state.g = out.value;
                self.outer = lik;
            }
        }

        let (dist, g) = (&self.dist_outer, self.state.g);
        let out = mh_update_with(
            self.state.theta_y,
            self.outer.loglik,
            |t| {
                Ok(outer_loglik_from_dist(y, dist, t, g)
                    .map_or((f64::NEG_INFINITY, None), |(l, _)| (l.loglik, Some(l))))
            },
            &cfg.priors.theta_y,
            &cfg.proposal,
            rng,
        )?;
        self.tallies.theta_y.record(out.accepted);
        if let Some(Some(lik)) = out.payload {
            self.state.theta_y = out.value;
            self.outer = lik;
        }

        if let Some(w) = &self.state.w {
            let dist_in = self.dist_z.as_ref().unwrap_or(&self.dist_x);
            for i in 0..w.ncols() {
                let col = w.column(i).into_owned();
                let out = mh_update_with(
                    self.state.theta_w[i],
                    self.w_nodes[i].loglik,
                    |t| Ok(node_eval(&col, dist_in, t)),
                    &cfg.priors.theta_w,
                    &cfg.proposal,
                    rng,
                )?;
                self.tallies.theta_w[i].record(out.accepted);
                if let Some(Some(node)) = out.payload {
                    self.state.theta_w[i] = out.value;
                    self.w_nodes[i] = node;
                }
            }
        }

        if let Some(z) = &self.state.z {
            for i in 0..z.ncols() {
                let col = z.column(i).into_owned();
                let dist_x = &self.dist_x;
                let out = mh_update_with(
                    self.state.theta_z[i],
                    self.z_nodes[i].loglik,
                    |t| Ok(node_eval(&col, dist_x, t)),
                    &cfg.priors.theta_z,
                    &cfg.proposal,
                    rng,
                )?;
                self.tallies.theta_z[i].record(out.accepted);
                if let Some(Some(node)) = out.payload {
                    self.state.theta_z[i] = out.value;
                    self.z_nodes[i] = node;
                }
            }
        }

        if self.state.w.is_some() {
            for i in 0..self.w_nodes.len() {
                self.update_w_node(i, rng)?;
            }
        }
        if self.state.z.is_some() {
            for i in 0..self.z_nodes.len() {
                self.update_z_node(i, rng)?;
            }
        }
        self.state.tau2hat = self.outer.tau2hat;
        Ok(())
    }

    fn update_w_node<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) -> Result<()> {
        let w = self.state.w.as_ref().expect("latent layer present");
        let (y, theta_y, g) = (self.y, self.state.theta_y, self.state.g);
        let out = ess_update(
            &w.column(i).into_owned(),
            self.outer.loglik,
            &self.w_nodes[i].chol,
            |f| {
                let dist = sq_dist_self(&with_column(w, i, f));
                Ok(match outer_loglik_from_dist(y, &dist, theta_y, g) {
                    Ok((lik, _)) => (lik.loglik, Some((dist, lik))),
                    Err(_) => (f64::NEG_INFINITY, None),
                })
            },
            rng,
        )?;
        self.tallies.ess_w.record(out.shrinks);
        if let Some(Some((dist, lik))) = out.payload {
            self.state.w.as_mut().unwrap().set_column(i, &out.f);
            self.dist_outer = dist;
            self.outer = lik;
            self.w_nodes[i].loglik = node_loglik_with(&out.f, &self.w_nodes[i].chol)?;
        }
        Ok(())
    }

    fn update_z_node<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) -> Result<()> {
        let z = self.state.z.as_ref().expect("three-layer model");
        let w = self.state.w.as_ref().expect("latent layer present");
        let theta_w = &self.state.theta_w;
        let current: f64 = self.w_nodes.iter().map(|c| c.loglik).sum();
        let out = ess_update(
            &z.column(i).into_owned(),
            current,
            &self.z_nodes[i].chol,
            |f| {
                let dist = sq_dist_self(&with_column(z, i, f));
                match node_caches(w, &dist, theta_w) {
                    Ok(nodes) => {
                        let ll = nodes.iter().map(|c| c.loglik).sum();
                        Ok((ll, Some((dist, nodes))))
                    }
                    Err(_) => Ok((f64::NEG_INFINITY, None)),
                }
            },
            rng,
        )?;
        self.tallies.ess_z.record(out.shrinks);
        if let Some(Some((dist, nodes))) = out.payload {
            self.state.z.as_mut().unwrap().set_column(i, &out.f);
            self.dist_z = Some(dist);
            self.w_nodes = nodes;
            self.z_nodes[i].loglik = node_loglik_with(&out.f, &self.z_nodes[i].chol)?;
        }
        Ok(())
    }
}

fn node_eval(col: &DVector<f64>, dist: &DMatrix<f64>, theta: f64) -> (f64, Option<NodeCache>) {
    match node_loglik_from_dist(col, dist, theta) {
        Ok((loglik, chol)) => (loglik, Some(NodeCache { loglik, chol })),
        Err(_) => (f64::NEG_INFINITY, None),
    }
}

/// Runs `iters` Gibbs sweeps from `init`, recording the state after each.
pub fn gibbs_run<R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    data: &Dataset,
    init: ChainState,
    iters: usize,
    rng: &mut R,
) -> Result<Trace> {
    let mut chain = Chain::new(cfg, data, init).map_err(|e| Error::Sampler {
        iteration: 0,
        source: Box::new(e),
    })?;
    let start = chain.state.iteration;
    let mut states = Vec::with_capacity(iters);
    for t in 1..=iters {
        chain.sweep(rng).map_err(|e| Error::Sampler {
            iteration: start + t,
            source: Box::new(e),
        })?;
        chain.state.iteration = start + t;
        states.push(chain.state.clone());
    }
    Ok(Trace {
        states,
        meta: TraceMeta {
            iterations: iters,
            seed: None,
            burn: 0,
            thin: 1,
            tallies: chain.tallies,
        },
    })
}

/// Columnar header: `iteration, g, theta_y, theta_w_1..p, theta_z_1..p,
/// tau2hat`, then `W` and `Z` flattened column-major as `w<node>_<row>`.
pub fn trace_header(layers: Layers, n: usize, p: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["iteration".into(), "g".into(), "theta_y".into()];
    let pw = if layers == Layers::One { 0 } else { p };
    let pz = if layers == Layers::Three { p } else { 0 };
    h.extend((1..=pw).map(|i| format!("theta_w_{i}")));
    h.extend((1..=pz).map(|i| format!("theta_z_{i}")));
    h.push("tau2hat".into());
    for (prefix, count) in [("w", pw), ("z", pz)] {
        for node in 1..=count {
            h.extend((1..=n).map(|row| format!("{prefix}{node}_{row}")));
        }
    }
    h
}

pub fn write_trace<W: Write>(out: &mut W, trace: &Trace, layers: Layers, n: usize) -> Result<()> {
    let p = trace.states.first().map_or(0, |s| s.theta_w.len());
    writeln!(out, "{}", trace_header(layers, n, p).join(","))?;
    for s in &trace.states {
        let mut row = vec![s.iteration.to_string(), fmt_f64(s.g), fmt_f64(s.theta_y)];
        row.extend(s.theta_w.iter().chain(&s.theta_z).map(|&v| fmt_f64(v)));
        row.push(fmt_f64(s.tau2hat));
        for m in s.w.iter().chain(s.z.iter()) {
            row.extend(m.iter().map(|&v| fmt_f64(v)));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_trace`]; tallies are not part of the columnar file.
pub fn read_trace<Rd: std::io::Read>(input: Rd, layers: Layers, n: usize, p: usize) -> Result<Trace> {
    let (header, rows) = read_table(input)?;
    let expected = trace_header(layers, n, p);
    if header != expected {
        return Err(Error::Parse(format!(
            "trace header does not match a {}-layer model with n = {n}, p = {p}",
            layers.count()
        )));
    }
    let pw = if layers == Layers::One { 0 } else { p };
    let pz = if layers == Layers::Three { p } else { 0 };
    let states = rows
        .into_iter()
        .map(|r| {
            let mut it = r.into_iter();
            let mut next = || it.next().expect("row length checked against header");
            let iteration = next() as usize;
            let g = next();
            let theta_y = next();
            let theta_w: Vec<f64> = (0..pw).map(|_| next()).collect();
            let theta_z: Vec<f64> = (0..pz).map(|_| next()).collect();
            let tau2hat = next();
            let w = (pw > 0).then(|| Design::from_iterator(n, pw, (0..n * pw).map(|_| next())));
            let z = (pz > 0).then(|| Design::from_iterator(n, pz, (0..n * pz).map(|_| next())));
            ChainState {
                iteration,
                g,
                theta_y,
                theta_w,
                theta_z,
                w,
                z,
                tau2hat,
            }
        })
        .collect::<Vec<_>>();
    let len = states.len();
    Ok(Trace {
        states,
        meta: TraceMeta {
            iterations: len,
            thin: 1,
            ..TraceMeta::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior(rate: f64) -> PriorSpec {
        PriorSpec::new(rate).unwrap()
    }

    #[test]
    fn gamma_prior_values() {
        assert!((gamma_log_prior(1.0, &prior(3.9)).unwrap() + 3.9).abs() < 1e-15);
        assert!(matches!(gamma_log_prior(0.0, &prior(3.9)), Err(Error::Domain(_))));
        assert!(gamma_log_prior(-1.0, &prior(3.9)).is_err());
    }

    #[test]
    fn gamma_prior_mass_below_one() {
        let mass = oracle::gamma_cdf_by_quadrature(1.0, 1.5, 3.9);
        assert!((mass - 0.95).abs() < 0.005, "mass {mass}");
    }

    #[test]
    fn log_prior_differences_match_full_density() {
        let p = prior(3.9 / 6.0);
        let full = |x: f64| {
            let norm = statrs::function::gamma::ln_gamma(1.5) - 1.5 * p.rate.ln();
            0.5 * x.ln() - p.rate * x - norm
        };
        for (a, b) in [(0.1, 2.0), (0.7, 0.3), (5.0, 1e-3)] {
            let ours = gamma_log_prior(a, &p).unwrap() - gamma_log_prior(b, &p).unwrap();
            assert!((ours - (full(a) - full(b))).abs() < 1e-12);
        }
    }

    #[test]
    fn window_bounds_and_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ProposalSpec::default();
        for _ in 0..10_000 {
            let (star, lq) = propose_window(1.0, &spec, &mut rng);
            assert!((0.5..=2.0).contains(&star));
            assert!((lq - (1.0f64.ln() - star.ln())).abs() < 1e-15);
        }
        assert!(ProposalSpec::new(2.0, 1.0).is_err());
    }

    #[test]
    fn window_draws_are_uniform() {
        // Kolmogorov-Smirnov against Unif(0.5, 2); critical value at 1% is
        // 1.628 / sqrt(n).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| propose_window(1.0, &ProposalSpec::default(), &mut rng).0)
            .collect();
        draws.sort_by(f64::total_cmp);
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x - 0.5) / 1.5;
                ((i + 1) as f64 / n as f64 - cdf).abs().max((cdf - i as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn flat_target_accepts_at_proposal_ratio() {
        // With flat likelihood and prior (shape 1, rate → 0), acceptance is
        // min(1, prev/star); check the empirical rate against the exact
        // expectation E[min(1, 1/s)] for s ~ Unif(0.5, 2).
        let flat = PriorSpec {
            shape: 1.0,
            rate: 1e-300,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 200_000;
        let accepted = (0..trials)
            .filter(|_| {
                mh_update_scalar(1.0, 0.0, |_| Ok(0.0), &flat, &ProposalSpec::default(), &mut rng)
                    .unwrap()
                    .accepted
            })
            .count();
        let expected = (0.5 + 2f64.ln()) / 1.5;
        let rate = accepted as f64 / trials as f64;
        assert!((rate - expected).abs() < 0.005, "{rate} vs {expected}");
    }

    #[test]
    fn sharp_peak_rejects_distant_proposals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let out = mh_update_scalar(
                1.0,
                0.0,
                |x| Ok(-1e6 * (x - 1.0).powi(2)),
                &prior(1.0),
                &ProposalSpec::new(1.0, 3.0).unwrap(),
                &mut rng,
            )
            .unwrap();
            if !out.accepted {
                assert_eq!(out.value, 1.0);
            } else {
                assert!((out.value - 1.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn mh_chain_matches_rejection_sampler() {
        // Target ∝ Gamma(1.5, 2) prior × exp(−(x − 1)²/(2·0.3²)) on (0, ∞).
        let pr = prior(2.0);
        let ll = |x: f64| -(x - 1.0).powi(2) / (2.0 * 0.09);
        let log_target = |x: f64| gamma_log_prior(x, &pr).unwrap() + ll(x);

        // rejection sampler with Unif(0, 4) envelope; target mass beyond 4 is
        // negligible (> 10 sd above the mode)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid_max = (1..4000)
            .map(|k| log_target(k as f64 * 1e-3))
            .fold(f64::NEG_INFINITY, f64::max)
            + 1e-3;
        let mut oracle_draws = Vec::with_capacity(1_000_000);
        while oracle_draws.len() < 1_000_000 {
            let x = 4.0 * rng.random::<f64>();
            if x > 0.0 && rng.random::<f64>().ln() < log_target(x) - grid_max {
                oracle_draws.push(x);
            }
        }
        oracle_draws.sort_by(f64::total_cmp);
        let deciles: Vec<f64> = (1..10).map(|k| oracle_draws[k * 100_000]).collect();

        let mut x = 1.0;
        let mut cur = ll(x);
        let mut samples = Vec::new();
        for t in 0..220_000 {
            let out = mh_update_scalar(x, cur, |v| Ok(ll(v)), &pr, &ProposalSpec::default(), &mut rng)
                .unwrap();
            x = out.value;
            cur = out.loglik;
            if t >= 20_000 && t % 10 == 0 {
                samples.push(x);
            }
        }
        // each decile bin should hold 10% of the chain; allow 3σ with an
        // effective sample size of a quarter of the retained draws
        let m = samples.len() as f64;
        let sigma = (0.1 * 0.9 / (m / 4.0)).sqrt();
        let mut edges = vec![0.0];
        edges.extend(&deciles);
        edges.push(f64::INFINITY);
        for w in edges.windows(2) {
            let frac = samples.iter().filter(|&&s| s >= w[0] && s < w[1]).count() as f64 / m;
            assert!((frac - 0.1).abs() < 3.0 * sigma, "bin {w:?}: {frac}");
        }
    }

    fn ess_fixture(n: usize) -> (CholFactor, DMatrix<f64>) {
        let x = Design::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let k = crate::kernel::cov_matrix(&x, &crate::kernel::KernelParams::new(0.1, 1.0, 1e-6).unwrap());
        (cholesky(&k).unwrap(), k)
    }

    #[test]
    fn ess_constant_likelihood_recovers_prior() {
        let n = 20;
        let (chol, k) = ess_fixture(n);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let steps = 10_000;
        let mut f = DVector::zeros(n);
        let mut sum = DVector::zeros(n);
        let mut sum2 = DVector::zeros(n);
        for _ in 0..steps {
            let out = ess_update(&f, 0.0, &chol, |_| Ok((0.0, ())), &mut rng).unwrap();
            assert_eq!(out.shrinks, 0);
            f = out.f;
            sum += &f;
            sum2 += f.map(|v| v * v);
        }
        let s = steps as f64;
        for i in 0..n {
            let mean = sum[i] / s;
            let var = sum2[i] / s - mean * mean;
            // chained prior draws are correlated; ESS on a flat target mixes
            // with lag-one correlation E[cos γ] = 0, so draws are effectively
            // independent
            let se = (k[(i, i)] / s).sqrt();
            assert!(mean.abs() < 3.0 * se, "coord {i}: mean {mean}");
            assert!((var / k[(i, i)] - 1.0).abs() < 0.05, "coord {i}: var {var}");
        }
    }

    #[test]
    fn ess_is_deterministic_and_terminates() {
        let (chol, _) = ess_fixture(10);
        let target = DVector::from_fn(10, |i, _| (i as f64 * 0.6).sin());
        let ll = |f: &DVector<f64>| Ok((-(f - &target).norm_squared() / (2.0 * 0.01), ()));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = DVector::zeros(10);
            let mut cur = ll(&f).unwrap().0;
            let mut max_shrinks = 0;
            for _ in 0..500 {
                let out = ess_update(&f, cur, &chol, ll, &mut rng).unwrap();
                max_shrinks = max_shrinks.max(out.shrinks);
                f = out.f;
                cur = out.loglik;
            }
            (f, max_shrinks)
        };
        let (a, shrinks) = run(7);
        let (b, _) = run(7);
        assert_eq!(a, b);
        assert!(shrinks < 1000);
    }

    #[test]
    fn ess_treats_non_finite_as_rejection() {
        let (chol, _) = ess_fixture(5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = DVector::from_element(5, 0.5);
        let out = ess_update(&f, 0.0, &chol, |_| Ok((f64::NAN, ())), &mut rng).unwrap();
        assert_eq!(out.f, f);
        assert!(out.payload.is_none());
    }

    #[test]
    fn trim_bookkeeping() {
        let state = |t| ChainState {
            iteration: t,
            g: 0.1,
            theta_y: 0.5,
            theta_w: vec![],
            theta_z: vec![],
            w: None,
            z: None,
            tau2hat: 1.0,
        };
        let trace = Trace {
            states: (1..=10_000).map(state).collect(),
            meta: TraceMeta::default(),
        };
        assert_eq!(trim(&trace, 0, 1).unwrap(), Trace { meta: TraceMeta { thin: 1, ..TraceMeta::default() }, ..trace.clone() });
        let t = trim(&trace, 6000, 2).unwrap();
        assert_eq!(t.len(), 2000);
        assert_eq!(t.states[0].iteration, 6001);
        let t = trim(&trace, 7, 3).unwrap();
        assert_eq!(t.len(), (10_000 - 7usize).div_ceil(3));
        assert!(matches!(trim(&trace, 10_000, 1), Err(Error::EmptyTrace)));
    }
}
