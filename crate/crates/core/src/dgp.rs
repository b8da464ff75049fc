//! Layered models: configuration, fitting, latent propagation of test inputs
//! and aggregated posterior prediction.
//!
//! Prediction maps test inputs through every retained iteration
//! (`X → Z → W → Y`), takes per-iteration Gaussian moments and combines them by
//! the laws of total expectation and variance.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_dataset, write_dataset, Coding, Dataset};
use crate::error::{Error, Result};
use crate::gp::{moments_from_parts, PredictiveMoments};
use crate::kernel::{cov_from_dist, cross_cov, sq_dist, sq_dist_self, Design, KernelParams};
use crate::linalg::{cholesky_jittered, CholFactor};
use crate::sampler::{
    gibbs_run, nugget_floor, read_trace, trim, write_trace, ChainState, Layers, PriorSet,
    ProposalSpec, SamplerConfig, Trace,
};

/// How test inputs are pushed through a latent layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Conditional mean only.
    #[default]
    Mean,
    /// A joint draw from the conditional distribution.
    Sample,
}

impl std::str::FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LatentMode::Mean),
            "sample" => Ok(LatentMode::Sample),
            _ => Err(Error::Config(format!("latent mode must be mean or sample, got '{s}'"))),
        }
    }
}

pub const THETA_INIT: f64 = 0.5;
pub const G_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Layers,
    /// Latent node count; defaults to the input dimension.
    pub p: Option<usize>,
    pub deterministic: bool,
    pub priors: PriorSet,
    pub proposal: ProposalSpec,
    pub iters: usize,
    pub burn: usize,
    pub thin: usize,
}

impl ModelConfig {
    /// Default priors and a 10000/6000/2 chain.
    pub fn new(layers: Layers) -> Self {
        Self {
            layers,
            p: None,
            deterministic: false,
            priors: PriorSet::defaults(layers),
            proposal: ProposalSpec::default(),
            iters: 10_000,
            burn: 6_000,
            thin: 2,
        }
    }

    pub fn with_chain(mut self, iters: usize, burn: usize, thin: usize) -> Self {
        self.iters = iters;
        self.burn = burn;
        self.thin = thin;
        self
    }

    pub fn latent_dim(&self, d: usize) -> Result<usize> {
        match self.layers {
            Layers::One => Ok(0),
            _ => match self.p.unwrap_or(d) {
                0 => Err(Error::Config("p must be at least 1".into())),
                p => Ok(p),
            },
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            layers: self.layers,
            deterministic: self.deterministic,
            priors: self.priors,
            proposal: self.proposal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.burn >= self.iters {
            return Err(Error::Config(format!(
                "burn ({}) must be smaller than iters ({})",
                self.burn, self.iters
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.p == Some(0) {
            return Err(Error::Config("p must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FittedModel {
    pub config: ModelConfig,
    pub data: Dataset,
    /// Burned and thinned.
    pub trace: Trace,
    /// Last state of the untrimmed chain, for warm restarts.
    pub final_state: ChainState,
}

impl FittedModel {
    pub fn p(&self) -> usize {
        self.final_state.p()
    }
}

/// Starting state: all lengthscales 0.5, `g = 0.1` (the nugget floor when
/// deterministic), latent layers set to the leading `p` columns of `X`,
/// recycled when `p > d`.
pub fn initial_state(cfg: &ModelConfig, data: &Dataset) -> Result<ChainState> {
    let (n, d) = (data.n(), data.d());
    let p = cfg.latent_dim(d)?;
    let warp = || Design::from_fn(n, p, |i, j| data.x[(i, j % d)]);
    let (w, z, theta_w, theta_z) = match cfg.layers {
        Layers::One => (None, None, vec![], vec![]),
        Layers::Two => (Some(warp()), None, vec![THETA_INIT; p], vec![]),
        Layers::Three => (Some(warp()), Some(warp()), vec![THETA_INIT; p], vec![THETA_INIT; p]),
    };
    Ok(ChainState {
        iteration: 0,
        g: if cfg.deterministic { nugget_floor() } else { G_INIT },
        theta_y: THETA_INIT,
        theta_w,
        theta_z,
        w,
        z,
        tau2hat: f64::NAN,
    })
}

pub fn fit(cfg: &ModelConfig, data: Dataset, seed: u64) -> Result<FittedModel> {
    let init = initial_state(cfg, &data)?;
    fit_from(cfg, data, init, seed)
}

/// Runs the chain from a given state, e.g. one produced by [`extend_state`].
pub fn fit_from(cfg: &ModelConfig, data: Dataset, init: ChainState, seed: u64) -> Result<FittedModel> {
    cfg.validate()?;
    if data.n() < 2 {
        return Err(Error::Domain(format!("fitting needs n >= 2, got {}", data.n())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = gibbs_run(&cfg.sampler(), &data, init, cfg.iters, &mut rng)?;
    let final_state = full.last().cloned().ok_or(Error::EmptyTrace)?;
    let mut trace = trim(&full, cfg.burn, cfg.thin)?;
    trace.meta.seed = Some(seed);
    Ok(FittedModel {
        config: cfg.clone(),
        data,
        trace,
        final_state,
    })
}

/// Warm-start state for `data`, whose leading rows are the model's training
/// data. Latent values at the appended rows are the conditional means under
/// the model's final state.
pub fn extend_state(model: &FittedModel, data: &Dataset) -> Result<ChainState> {
    let n_old = model.data.n();
    if data.n() < n_old || data.d() != model.data.d() {
        return Err(Error::mismatch("warm-start data rows", n_old, data.n()));
    }
    let mut state = model.final_state.clone();
    if data.n() == n_old || state.w.is_none() {
        return Ok(state);
    }
    let new_x = data.x.rows(n_old, data.n() - n_old).into_owned();
    let (w_new, z_new) = map_state(&model.data.x, &state, &new_x, LatentMode::Mean, None)?;
    let stack = |old: &Design, new: &Design| {
        Design::from_fn(old.nrows() + new.nrows(), old.ncols(), |i, j| {
            if i < old.nrows() {
                old[(i, j)]
            } else {
                new[(i - old.nrows(), j)]
            }
        })
    };
    state.w = state.w.as_ref().map(|w| stack(w, &w_new));
    if let (Some(z), Some(zn)) = (&state.z, &z_new) {
        state.z = Some(stack(z, zn));
    }
    Ok(state)
}

/// Conditional moments of one noiseless unit-scale node at `test` given its
/// training values. When the training factor needed jitter, the same jitter
/// is added to exact-coincidence cross entries so training inputs map back
/// onto their own latent values.
fn node_moments(
    dist_train: &DMatrix<f64>,
    values: &DVector<f64>,
    theta: f64,
    test: &Design,
    dist_cross: &DMatrix<f64>,
    mode: LatentMode,
) -> Result<PredictiveMoments> {
    let params = KernelParams::latent(theta)?;
    let chol = cholesky_jittered(&cov_from_dist(dist_train, &params))?;
    let jitter = chol.jitter();
    let cross = dist_cross.map(|d| (-d / theta).exp() + if d == 0.0 { jitter } else { 0.0 });
    moments_from_parts(
        values,
        &chol,
        &cross,
        || cross_cov(test, test, theta),
        &params,
        true,
        mode == LatentMode::Mean,
    )
}

/// Draws `mean + L z` for a PSD covariance, using a symmetric square root so
/// rank-deficient conditionals are handled.
fn draw_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let scaled = DVector::from_fn(mean.len(), |i, _| eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
    mean + eig.eigenvectors * scaled
}

fn map_layer<R: Rng + ?Sized>(
    train_in: &Design,
    latent: &Design,
    thetas: &[f64],
    test_in: &Design,
    mode: LatentMode,
    mut rng: Option<&mut R>,
) -> Result<Design> {
    let dist_train = sq_dist_self(train_in);
    let dist_cross = sq_dist(test_in, train_in)?;
    let mut out = Design::zeros(test_in.nrows(), latent.ncols());
    for (i, &theta) in thetas.iter().enumerate() {
        let m = node_moments(
            &dist_train,
            &latent.column(i).into_owned(),
            theta,
            test_in,
            &dist_cross,
            mode,
        )?;
        let col = match (mode, m.cov.as_ref(), rng.as_deref_mut()) {
            (LatentMode::Sample, Some(cov), Some(r)) => draw_mvn(&m.mean, cov, r),
            _ => m.mean,
        };
        out.set_column(i, &col);
    }
    Ok(out)
}

/// Latent images of `test` under a single state: `(𝒲, 𝒵)`. `rng` is only
/// consulted in sample mode.
pub fn map_state(
    x: &Design,
    state: &ChainState,
    test: &Design,
    mode: LatentMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Design, Option<Design>)> {
    if test.ncols() != x.ncols() {
        return Err(Error::mismatch("test input columns", x.ncols(), test.ncols()));
    }
    let Some(w) = &state.w else {
        return Ok((test.clone(), None));
    };
    let mut rng = rng;
    let z_test = match &state.z {
        Some(z) => Some(map_layer(x, z, &state.theta_z, test, mode, rng.as_deref_mut())?),
        None => None,
    };
    let w_in = state.z.as_ref().unwrap_or(x);
    let w_test = map_layer(w_in, w, &state.theta_w, z_test.as_ref().unwrap_or(test), mode, rng)?;
    Ok((w_test, z_test))
}

#[derive(Clone, Debug)]
pub struct MappedTest {
    /// One `n′×p` matrix per retained iteration (`𝒳` itself for one layer).
    pub w: Vec<Design>,
    pub z: Option<Vec<Design>>,
}

/// Per-iteration generator for sample mode: a base seed drawn once from the
/// caller, one independent stream per iteration index, so results do not
/// depend on scheduling.
fn iteration_rng(base: u64, t: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(t as u64);
    r
}

pub fn map_latents<R: Rng + ?Sized>(
    model: &FittedModel,
    test: &Design,
    mode: LatentMode,
    rng: &mut R,
) -> Result<MappedTest> {
    let base: u64 = rng.random();
    let per_t: Vec<(Design, Option<Design>)> = model
        .trace
        .states
        .par_iter()
        .enumerate()
        .map(|(t, s)| {
            let mut r = iteration_rng(base, t);
            map_state(&model.data.x, s, test, mode, Some(&mut r))
        })
        .collect::<Result<_>>()?;
    let three = model.config.layers == Layers::Three;
    let (w, z): (Vec<_>, Vec<_>) = per_t.into_iter().unzip();
    Ok(MappedTest {
        w,
        z: three.then(|| z.into_iter().map(|m| m.expect("three-layer map")).collect()),
    })
}

/// Per-iteration outer-layer moments at already-mapped test latents.
pub fn state_moments(
    y: &DVector<f64>,
    w_train: &Design,
    state: &ChainState,
    w_test: &Design,
    noise_free: bool,
    pointwise: bool,
) -> Result<PredictiveMoments> {
    let c = cov_from_dist(&sq_dist_self(w_train), &KernelParams::new(state.theta_y, 1.0, state.g)?);
    let chol: CholFactor = cholesky_jittered(&c)?;
    let cross = cross_cov(w_test, w_train, state.theta_y)?;
    let params = KernelParams::new(state.theta_y, state.tau2hat, state.g)?;
    moments_from_parts(
        y,
        &chol,
        &cross,
        || cross_cov(w_test, w_test, state.theta_y),
        &params,
        noise_free,
        pointwise,
    )
}

/// Fixed-size blocks keep the reduction order independent of thread count.
const REDUCE_BLOCK: usize = 32;

/// Combines per-iteration moments: averaged mean; averaged (co)variance plus
/// the spread of the per-iteration means, divided by `|𝒯| − 1` pointwise and
/// `|𝒯| − n′` for the full covariance. A single iteration is returned as is.
pub fn aggregate(per_t: &[PredictiveMoments], pointwise: bool) -> Result<PredictiveMoments> {
    let t_len = per_t.len();
    let first = per_t.first().ok_or(Error::EmptyTrace)?;
    if t_len == 1 {
        return Ok(first.clone());
    }
    let m = first.mean.len();
    if !pointwise && t_len <= m {
        return Err(Error::InsufficientSamples {
            retained: t_len,
            needed: m,
        });
    }
    let tf = t_len as f64;
    let mean = per_t.iter().fold(DVector::zeros(m), |acc, pm| acc + &pm.mean) / tf;
    let dof = first.dof;
    if pointwise {
        let mut var = DVector::zeros(m);
        let mut spread = DVector::zeros(m);
        for pm in per_t {
            var += &pm.var;
            let d = &pm.mean - &mean;
            spread += d.component_mul(&d);
        }
        let var = var / tf + spread / (tf - 1.0);
        return Ok(PredictiveMoments {
            mean,
            var,
            cov: None,
            dof,
        });
    }
    let mut cov = DMatrix::zeros(m, m);
    let mut spread = DMatrix::zeros(m, m);
    for pm in per_t {
        cov += pm.cov.as_ref().ok_or_else(|| Error::Domain("full aggregation needs covariances".into()))?;
        let d = &pm.mean - &mean;
        spread.ger(1.0, &d, &d, 1.0);
    }
    let cov = cov / tf + spread / (tf - m as f64);
    let var = cov.diagonal().map(|v| v.max(0.0));
    Ok(PredictiveMoments {
        mean,
        var,
        cov: Some(cov),
        dof,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictOptions {
    pub pointwise: bool,
    pub noise_free: bool,
    pub latent_mode: LatentMode,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            pointwise: true,
            noise_free: false,
            latent_mode: LatentMode::Sample,
        }
    }
}

pub fn predict<R: Rng + ?Sized>(
    model: &FittedModel,
    test: &Design,
    opts: PredictOptions,
    rng: &mut R,
) -> Result<PredictiveMoments> {
    if test.ncols() != model.data.d() {
        return Err(Error::mismatch("test input columns", model.data.d(), test.ncols()));
    }
    let states = &model.trace.states;
    if !opts.pointwise && states.len() > 1 && states.len() <= test.nrows() {
        return Err(Error::InsufficientSamples {
            retained: states.len(),
            needed: test.nrows(),
        });
    }
    let base: u64 = rng.random();
    let x = &model.data.x;
    let per_t: Vec<PredictiveMoments> = states
        .par_chunks(REDUCE_BLOCK)
        .enumerate()
        .map(|(b, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let t = b * REDUCE_BLOCK + k;
                    let mut r = iteration_rng(base, t);
                    let (w_test, _) = map_state(x, s, test, opts.latent_mode, Some(&mut r))?;
                    state_moments(&model.data.y, s.outer_inputs(x), s, &w_test, opts.noise_free, opts.pointwise)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<Vec<_>>>>()?
        .into_iter()
        .flatten()
        .collect();
    aggregate(&per_t, opts.pointwise)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    n: usize,
    d: usize,
    p: usize,
    retained: usize,
    seed: Option<u64>,
    config: ModelConfig,
    coding: Option<Coding>,
    acceptance: Vec<(String, f64)>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATA_FILE: &str = "data.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const FINAL_FILE: &str = "final.csv";

/// Acceptance rates of every Metropolis-updated scalar.
pub fn acceptance_rates(trace: &Trace) -> Vec<(String, f64)> {
    let t = &trace.meta.tallies;
    let mut out = Vec::new();
    if t.g.proposed > 0 {
        out.push(("g".into(), t.g.rate()));
    }
    out.push(("theta_y".into(), t.theta_y.rate()));
    for (i, tally) in t.theta_w.iter().enumerate() {
        out.push((format!("theta_w_{}", i + 1), tally.rate()));
    }
    for (i, tally) in t.theta_z.iter().enumerate() {
        out.push((format!("theta_z_{}", i + 1), tally.rate()));
    }
    out
}

/// Writes manifest, training data, retained trace and final chain state into
/// `dir` (created if missing).
pub fn save_model(model: &FittedModel, coding: Option<&Coding>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: 1,
        n: model.data.n(),
        d: model.data.d(),
        p: model.p(),
        retained: model.trace.len(),
        seed: model.trace.meta.seed,
        config: model.config.clone(),
        coding: coding.cloned(),
        acceptance: acceptance_rates(&model.trace).into_iter().filter(|(_, r)| r.is_finite()).collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    let mut f = BufWriter::new(File::create(dir.join(DATA_FILE))?);
    write_dataset(&mut f, &model.data)?;
    f.flush()?;
    let n = model.data.n();
    let mut f = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    write_trace(&mut f, &model.trace, model.config.layers, n)?;
    f.flush()?;
    let last = Trace {
        states: vec![model.final_state.clone()],
        meta: Default::default(),
    };
    let mut f = BufWriter::new(File::create(dir.join(FINAL_FILE))?);
    write_trace(&mut f, &last, model.config.layers, n)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(FittedModel, Option<Coding>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Parse(format!("{MANIFEST_FILE}: {e}")))?;
    let data = read_dataset(&dir.join(DATA_FILE))?;
    if data.n() != m.n || data.d() != m.d {
        return Err(Error::Parse("model data does not match its manifest".into()));
    }
    let layers = m.config.layers;
    let mut trace = read_trace(BufReader::new(File::open(dir.join(TRACE_FILE))?), layers, m.n, m.p)?;
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    trace.meta.seed = m.seed;
    let last = read_trace(BufReader::new(File::open(dir.join(FINAL_FILE))?), layers, m.n, m.p)?;
    let final_state = last.states.into_iter().next().ok_or(Error::EmptyTrace)?;
    Ok((
        FittedModel {
            config: m.config,
            data,
            trace,
            final_state,
        },
        m.coding,
    ))
}
