//! Sequential design: initial Latin hypercube, fit → acquire → evaluate →
//! refit with a warm start, and out-of-sample tracking.
//!
//! All modelling happens on coded inputs (the blackbox domain mapped to the
//! unit cube) and standardized responses, re-standardized as data accrue.
//! Histories report natural units.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Deserialize;

use crate::acquisition::{evaluate_candidates, Criterion};
use crate::data::{fmt_f64, input_header, read_dataset, Coding, Dataset};
use crate::dgp::{extend_state, fit, fit_from, predict, FittedModel, LatentMode, ModelConfig, PredictOptions};
use crate::error::{Error, Result};
use crate::kernel::Design;
use crate::linalg::cholesky_jittered;
use crate::sampler::{Layers, PriorSet, ProposalSpec};

/// Stratified sample: in every column each interval `[k/n, (k+1)/n)` holds
/// exactly one point.
pub fn lhs<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Design {
    let mut x = Design::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (i, &k) in perm.iter().enumerate() {
            x[(i, j)] = (k as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    x
}

/// Piecewise test function on `[0, 1]`: fast oscillation, a flat plateau,
/// slower oscillation. Both break points belong to the plateau.
pub fn f_piecewise_1d(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("piecewise function defined on [0, 1], got {x}")));
    }
    Ok(if x < 0.33 {
        1.35 * (12.0 * std::f64::consts::PI * x).cos()
    } else if x <= 0.66 {
        1.35
    } else {
        1.35 * (6.0 * std::f64::consts::PI * x).cos()
    })
}

/// `10 x₁ exp(−x₁² − x₂²)` on `[−2, 4]²`.
pub fn f_exp_2d(x1: f64, x2: f64) -> Result<f64> {
    let dom = -2.0..=4.0;
    if !dom.contains(&x1) || !dom.contains(&x2) {
        return Err(Error::Domain(format!("2d function defined on [-2, 4]^2, got ({x1}, {x2})")));
    }
    Ok(10.0 * x1 * (-x1 * x1 - x2 * x2).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlackboxKind {
    Piecewise1d,
    Exp2d,
    /// Shell command speaking the line protocol: one whitespace-separated
    /// coded input per line in, one number per line out.
    External { command: String, timeout: Duration },
}

/// How long an external command may take to answer one request by default.
pub const DEFAULT_RESPONSE_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Clone, Debug, PartialEq)]
pub struct Blackbox {
    pub kind: BlackboxKind,
    pub noise_sd: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Blackbox {
    pub fn piecewise_1d(noise_sd: f64) -> Self {
        Self {
            kind: BlackboxKind::Piecewise1d,
            noise_sd,
            lo: vec![0.0],
            hi: vec![1.0],
        }
    }

    pub fn exp_2d(noise_sd: f64) -> Self {
        Self {
            kind: BlackboxKind::Exp2d,
            noise_sd,
            lo: vec![-2.0; 2],
            hi: vec![4.0; 2],
        }
    }

    pub fn external(command: impl Into<String>, lo: Vec<f64>, hi: Vec<f64>, noise_sd: f64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::Config("external domain needs matching lo < hi per dimension".into()));
        }
        Ok(Self {
            kind: BlackboxKind::External {
                command: command.into(),
                timeout: DEFAULT_RESPONSE_TIMEOUT,
            },
            noise_sd,
            lo,
            hi,
        })
    }

    pub fn with_timeout(mut self, limit: Duration) -> Self {
        if let BlackboxKind::External { timeout, .. } = &mut self.kind {
            *timeout = limit;
        }
        self
    }

    pub fn d(&self) -> usize {
        self.lo.len()
    }

    pub fn decode(&self, coded: &[f64]) -> Vec<f64> {
        coded
            .iter()
            .enumerate()
            .map(|(j, u)| self.lo[j] + u * (self.hi[j] - self.lo[j]))
            .collect()
    }

    pub fn decode_design(&self, coded: &Design) -> Design {
        Design::from_fn(coded.nrows(), coded.ncols(), |i, j| {
            self.lo[j] + coded[(i, j)] * (self.hi[j] - self.lo[j])
        })
    }

    pub fn code_design(&self, x: &Design) -> Design {
        Design::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.lo[j]) / (self.hi[j] - self.lo[j]))
    }

    /// Noise-free value of a builtin at a natural-unit point.
    pub fn truth(&self, x: &[f64]) -> Result<f64> {
        match &self.kind {
            BlackboxKind::Piecewise1d => f_piecewise_1d(x[0]),
            BlackboxKind::Exp2d => f_exp_2d(x[0], x[1]),
            BlackboxKind::External { .. } => Err(Error::Config(
                "external blackboxes have no noise-free truth; supply a test file".into(),
            )),
        }
    }

    pub fn session(&self) -> Result<Session<'_>> {
        let child = match &self.kind {
            BlackboxKind::External { command, timeout } => Some(ExternalProcess::spawn(command, *timeout)?),
            _ => None,
        };
        Ok(Session { bb: self, child })
    }
}

pub struct ExternalProcess {
    child: Child,
    stdin: ChildStdin,
    /// Lines from the child's output, read on a helper thread so that a
    /// silent child can be timed out.
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ExternalProcess {
    fn spawn(cmd: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::ExternalFailure(format!("cannot start '{cmd}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in stdout.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines,
            timeout,
        })
    }

    fn query(&mut self, coded: &[f64]) -> Result<f64> {
        let line: Vec<String> = coded.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(self.stdin, "{}", line.join(" "))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::ExternalFailure(format!("write failed: {e}")))?;
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(line) => line.map_err(|e| Error::ExternalFailure(format!("read failed: {e}")))?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::ExternalFailure(format!(
                    "no response within {} s",
                    self.timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.try_wait().ok().flatten();
                return Err(Error::ExternalFailure(match status {
                    Some(s) => format!("process exited ({s}) without a response"),
                    None => "process closed its output without a response".into(),
                }));
            }
        };
        let v: f64 = reply
            .trim()
            .parse()
            .map_err(|_| Error::ExternalFailure(format!("unparsable response '{}'", reply.trim())))?;
        if !v.is_finite() {
            return Err(Error::ExternalFailure(format!("non-finite response {v}")));
        }
        Ok(v)
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A blackbox ready to evaluate; external commands stay running for the
/// session's lifetime.
pub struct Session<'a> {
    bb: &'a Blackbox,
    child: Option<ExternalProcess>,
}

impl Session<'_> {
    /// Noisy response at a coded point.
    pub fn evaluate<R: Rng + ?Sized>(&mut self, coded: &[f64], rng: &mut R) -> Result<f64> {
        if coded.len() != self.bb.d() {
            return Err(Error::mismatch("blackbox input", self.bb.d(), coded.len()));
        }
        if coded.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::Domain(format!("coded point {coded:?} outside the unit cube")));
        }
        let f = match &mut self.child {
            Some(p) => p.query(coded)?,
            None => self.bb.truth(&self.bb.decode(coded))?,
        };
        let noise: f64 = rng.sample(StandardNormal);
        Ok(f + self.bb.noise_sd * noise)
    }
}

pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::mismatch("rmse", truth.len(), pred.len()));
    }
    Ok(((pred - truth).norm_squared() / pred.len() as f64).sqrt())
}

/// Mean pointwise log score `−log σ² − (y − μ)²/σ²`; larger is better.
pub fn score(mean: &DVector<f64>, var: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if mean.len() != truth.len() || var.len() != truth.len() {
        return Err(Error::mismatch("score", truth.len(), mean.len().min(var.len())));
    }
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("score needs positive predictive variances".into()));
    }
    let total: f64 = (0..truth.len())
        .map(|i| -var[i].ln() - (truth[i] - mean[i]).powi(2) / var[i])
        .sum();
    Ok(total / truth.len() as f64)
}

/// Joint log score `−log|Σ| − rᵀΣ⁻¹r` of the full predictive.
pub fn score_mvn(mean: &DVector<f64>, cov: &DMatrix<f64>, truth: &DVector<f64>) -> Result<f64> {
    if mean.len() != truth.len() || cov.nrows() != truth.len() {
        return Err(Error::mismatch("score_mvn", truth.len(), mean.len()));
    }
    let chol = cholesky_jittered(cov)?;
    let r = truth - mean;
    Ok(-chol.logdet() - chol.quad_form(&r)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Pointwise,
    Mvn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    /// One test set shared by all repetitions.
    Fixed,
    /// A fresh test set per repetition.
    Redraw,
}

/// Flat key-value campaign file. Every key is optional here; defaults and
/// cross-key checks are applied by [`CampaignFile::resolve`].
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignFile {
    pub blackbox: Option<String>,
    pub command: Option<String>,
    /// Seconds an external command may take per response.
    pub response_timeout: Option<f64>,
    pub domain_lo: Option<Vec<f64>>,
    pub domain_hi: Option<Vec<f64>>,
    pub noise_sd: Option<f64>,
    pub n0: Option<usize>,
    pub n_final: Option<usize>,
    pub n_cand: Option<usize>,
    pub criterion: Option<Criterion>,
    pub layers: Option<u8>,
    pub p: Option<usize>,
    pub deterministic: Option<bool>,
    pub first_iters: Option<usize>,
    pub first_burn: Option<usize>,
    pub first_thin: Option<usize>,
    pub iters: Option<usize>,
    pub burn: Option<usize>,
    pub thin: Option<usize>,
    pub proposal_l: Option<f64>,
    pub proposal_u: Option<f64>,
    pub eval_every: Option<usize>,
    pub test_size: Option<usize>,
    pub test_file: Option<PathBuf>,
    pub test_mode: Option<TestMode>,
    pub score: Option<ScoreKind>,
    pub noise_free: Option<bool>,
    pub predict_latent: Option<LatentMode>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub timing: Option<bool>,
}

#[derive(Clone, Debug)]
pub enum TestSource {
    Generate(usize),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub blackbox: Blackbox,
    pub n0: usize,
    pub n_final: usize,
    pub n_cand: usize,
    pub criterion: Criterion,
    /// Chain settings of the first fit.
    pub first_fit: ModelConfig,
    /// Chain settings of every warm-started refit.
    pub refit: ModelConfig,
    pub eval_every: usize,
    pub test: TestSource,
    pub test_mode: TestMode,
    pub score: ScoreKind,
    pub noise_free: bool,
    pub predict_latent: LatentMode,
    pub reps: usize,
    pub seed: u64,
    /// Record wall-clock seconds per step; off makes histories byte-stable.
    pub timing: bool,
}

fn parse_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl CampaignFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut file = Self::parse(&text)?;
        // relative test files are relative to the config file
        if let (Some(t), Some(dir)) = (&file.test_file, path.parent()) {
            if t.is_relative() {
                file.test_file = Some(dir.join(t));
            }
        }
        Ok(file)
    }

    pub fn resolve(&self) -> Result<CampaignConfig> {
        let noise_sd = self.noise_sd.unwrap_or(0.1);
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(parse_err("noise_sd", "must be a nonnegative number"));
        }
        let kind = self.blackbox.as_deref().unwrap_or("builtin-1d");
        let blackbox = match kind {
            "builtin-1d" => Blackbox::piecewise_1d(noise_sd),
            "builtin-2d" => Blackbox::exp_2d(noise_sd),
            "external" => {
                let cmd = self.command.clone().ok_or_else(|| parse_err("command", "required for external blackboxes"))?;
                let lo = self.domain_lo.clone().ok_or_else(|| parse_err("domain_lo", "required for external blackboxes"))?;
                let hi = self.domain_hi.clone().ok_or_else(|| parse_err("domain_hi", "required for external blackboxes"))?;
                let limit = match self.response_timeout {
                    None => DEFAULT_RESPONSE_TIMEOUT,
                    Some(t) if t > 0.0 && t.is_finite() => Duration::from_secs_f64(t),
                    Some(_) => return Err(parse_err("response_timeout", "must be a positive number of seconds")),
                };
                Blackbox::external(cmd, lo, hi, noise_sd)
                    .map_err(|e| parse_err("domain_lo/domain_hi", e))?
                    .with_timeout(limit)
            }
            other => return Err(parse_err("blackbox", format!("unknown kind '{other}' (builtin-1d, builtin-2d, external)"))),
        };
        if kind != "external" {
            for (key, set) in [
                ("command", self.command.is_some()),
                ("response_timeout", self.response_timeout.is_some()),
                ("domain_lo", self.domain_lo.is_some()),
                ("domain_hi", self.domain_hi.is_some()),
            ] {
                if set {
                    return Err(parse_err(key, "only valid for external blackboxes"));
                }
            }
        }
        let n0 = self.n0.unwrap_or(10);
        let n_final = self.n_final.unwrap_or(35);
        if n0 < 2 {
            return Err(parse_err("n0", "must be at least 2"));
        }
        if n_final < n0 {
            return Err(parse_err("n_final", format!("must be at least n0 ({n0})")));
        }
        let n_cand = self.n_cand.unwrap_or(100);
        if n_cand == 0 {
            return Err(parse_err("n_cand", "must be at least 1"));
        }
        let layers = Layers::try_from(self.layers.unwrap_or(2)).map_err(|e| parse_err("layers", e))?;
        if self.p == Some(0) {
            return Err(parse_err("p", "must be at least 1"));
        }
        let proposal = ProposalSpec::new(self.proposal_l.unwrap_or(1.0), self.proposal_u.unwrap_or(2.0))
            .map_err(|e| parse_err("proposal_l/proposal_u", e))?;
        let base = ModelConfig {
            layers,
            p: self.p,
            deterministic: self.deterministic.unwrap_or(false),
            priors: PriorSet::defaults(layers),
            proposal,
            iters: 0,
            burn: 0,
            thin: 1,
        };
        let first_fit = base.clone().with_chain(
            self.first_iters.unwrap_or(10_000),
            self.first_burn.unwrap_or(6_000),
            self.first_thin.unwrap_or(2),
        );
        first_fit.validate().map_err(|e| parse_err("first_iters/first_burn/first_thin", e))?;
        let refit = base.with_chain(self.iters.unwrap_or(2_500), self.burn.unwrap_or(500), self.thin.unwrap_or(2));
        refit.validate().map_err(|e| parse_err("iters/burn/thin", e))?;
        let eval_every = self.eval_every.unwrap_or(1);
        if eval_every == 0 {
            return Err(parse_err("eval_every", "must be at least 1"));
        }
        let test = match (&self.test_file, self.test_size) {
            (Some(_), Some(_)) => return Err(parse_err("test_file", "give either test_file or test_size, not both")),
            (Some(f), None) => TestSource::File(f.clone()),
            (None, Some(0)) => return Err(parse_err("test_size", "must be at least 1")),
            (None, size) => {
                if matches!(blackbox.kind, BlackboxKind::External { .. }) {
                    return Err(parse_err("test_file", "required for external blackboxes"));
                }
                TestSource::Generate(size.unwrap_or(100))
            }
        };
        let reps = self.reps.unwrap_or(1);
        if reps == 0 {
            return Err(parse_err("reps", "must be at least 1"));
        }
        Ok(CampaignConfig {
            blackbox,
            n0,
            n_final,
            n_cand,
            criterion: self.criterion.unwrap_or(Criterion::Alc),
            first_fit,
            refit,
            eval_every,
            test,
            test_mode: self.test_mode.unwrap_or(TestMode::Fixed),
            score: self.score.unwrap_or(ScoreKind::Pointwise),
            noise_free: self.noise_free.unwrap_or(false),
            predict_latent: self.predict_latent.unwrap_or(LatentMode::Sample),
            reps,
            seed: self.seed.unwrap_or(1),
            timing: self.timing.unwrap_or(true),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Design size after this step's acquisition.
    pub n: usize,
    /// Natural units.
    pub x: Vec<f64>,
    pub y: f64,
    pub metrics: Option<Metrics>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignHistory {
    pub d: usize,
    pub n0: usize,
    /// Metrics of the first fit on the initial design.
    pub initial: Option<Metrics>,
    pub records: Vec<StepRecord>,
}

impl CampaignHistory {
    pub fn metrics_at(&self, n: usize) -> Option<Metrics> {
        if n == self.n0 {
            return self.initial;
        }
        self.records.iter().find(|r| r.n == n).and_then(|r| r.metrics)
    }

    /// Share of acquisitions whose first coordinate lies in `[lo, hi]`.
    pub fn region_fraction(&self, lo: f64, hi: f64) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        let hits = self.records.iter().filter(|r| (lo..=hi).contains(&r.x[0])).count();
        hits as f64 / self.records.len() as f64
    }
}

/// A history plus the error that stopped it early, if any.
#[derive(Debug)]
pub struct CampaignOutcome {
    pub rep: usize,
    pub history: CampaignHistory,
    pub error: Option<Error>,
}

#[derive(Clone, Debug)]
pub struct TestSet {
    /// Natural units.
    pub x: Design,
    pub y: DVector<f64>,
}

/// Latin hypercube test inputs with noise-free responses.
pub fn generate_test_set<R: Rng + ?Sized>(bb: &Blackbox, size: usize, rng: &mut R) -> Result<TestSet> {
    let x = bb.decode_design(&lhs(size, bb.d(), rng));
    let y = (0..size)
        .map(|i| bb.truth(&x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSet {
        x,
        y: DVector::from_vec(y),
    })
}

pub fn load_test_set(path: &Path, d: usize) -> Result<TestSet> {
    let data = read_dataset(path)?;
    if data.d() != d {
        return Err(Error::mismatch("test set columns", d, data.d()));
    }
    Ok(TestSet { x: data.x, y: data.y })
}

/// Seed of repetition `rep`: disjoint ChaCha streams off the base seed.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(rep as u64 + 1);
    r.next_u64()
}

fn unit_coding(d: usize, y: &DVector<f64>) -> Coding {
    Coding::with_domain(vec![0.0; d], vec![1.0; d], y)
}

fn evaluate_metrics(
    cfg: &CampaignConfig,
    model: &FittedModel,
    coding: &Coding,
    test: &TestSet,
    rng: &mut ChaCha8Rng,
) -> Result<Metrics> {
    let xt = cfg.blackbox.code_design(&test.x);
    let opts = PredictOptions {
        pointwise: cfg.score == ScoreKind::Pointwise,
        noise_free: cfg.noise_free,
        latent_mode: cfg.predict_latent,
    };
    let pred = predict(model, &xt, opts, rng)?;
    let mean = coding.decode_mean(&pred.mean);
    let score = match (cfg.score, &pred.cov) {
        (ScoreKind::Mvn, Some(cov)) => score_mvn(&mean, &coding.decode_cov(cov), &test.y)?,
        _ => score(&mean, &coding.decode_var(&pred.var), &test.y)?,
    };
    Ok(Metrics {
        rmse: rmse(&mean, &test.y)?,
        score,
    })
}

/// Fresh uniform candidates, redrawn wherever a draw exactly repeats an
/// existing design point.
fn draw_candidates<R: Rng + ?Sized>(n: usize, existing: &Design, rng: &mut R) -> Design {
    let d = existing.ncols();
    let mut out = Design::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        loop {
            row.iter_mut().for_each(|v| *v = rng.random::<f64>());
            let dup = existing.row_iter().any(|r| r.iter().zip(&row).all(|(a, b)| a == b));
            if !dup {
                break;
            }
        }
        for (j, &v) in row.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// Runs one repetition. Failures stop the loop; the history up to that
/// point is returned alongside the error.
pub fn run_campaign(cfg: &CampaignConfig, rep: usize, test: &TestSet) -> CampaignOutcome {
    let d = cfg.blackbox.d();
    let mut history = CampaignHistory {
        d,
        n0: cfg.n0,
        initial: None,
        records: Vec::new(),
    };
    let error = campaign_loop(cfg, rep, test, &mut history).err();
    CampaignOutcome { rep, history, error }
}

fn campaign_loop(cfg: &CampaignConfig, rep: usize, test: &TestSet, history: &mut CampaignHistory) -> Result<()> {
    let bb = &cfg.blackbox;
    let d = bb.d();
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed(cfg.seed, rep));
    let mut session = bb.session()?;

    let x0 = lhs(cfg.n0, d, &mut rng);
    let y0 = (0..cfg.n0)
        .map(|i| session.evaluate(&x0.row(i).iter().copied().collect::<Vec<_>>(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    // coded inputs, raw responses
    let mut data = Dataset::new(x0, DVector::from_vec(y0))?;

    let coding = unit_coding(d, &data.y);
    let mut model = fit(&cfg.first_fit, coding.code(&data)?, rng.random())?;
    let mut coding_now = coding;
    let steps = cfg.n_final - cfg.n0;
    history.initial = Some(evaluate_metrics(cfg, &model, &coding_now, test, &mut rng)?);

    for step in 1..=steps {
        let started = Instant::now();
        let cand = draw_candidates(cfg.n_cand, &data.x, &mut rng);
        let acq = evaluate_candidates(&model, &cand, cfg.criterion, &mut rng)?;
        let x_new: Vec<f64> = cand.row(acq.chosen).iter().copied().collect();
        let y_new = session.evaluate(&x_new, &mut rng)?;
        data.push(&x_new, y_new)?;

        coding_now = unit_coding(d, &data.y);
        let coded = coding_now.code(&data)?;
        let init = extend_state(&model, &coded)?;
        model = fit_from(&cfg.refit, coded, init, rng.random())?;
        let seconds = started.elapsed().as_secs_f64();

        let metrics = if step % cfg.eval_every == 0 || step == steps {
            Some(evaluate_metrics(cfg, &model, &coding_now, test, &mut rng)?)
        } else {
            None
        };
        history.records.push(StepRecord {
            step,
            n: data.n(),
            x: bb.decode(&x_new),
            y: y_new,
            metrics,
            seconds: cfg.timing.then_some(seconds),
        });
    }
    Ok(())
}

/// All repetitions, in parallel, ordered by repetition index.
pub fn run_repetitions(cfg: &CampaignConfig) -> Result<Vec<CampaignOutcome>> {
    let fixed = match (&cfg.test, cfg.test_mode) {
        (TestSource::File(path), _) => Some(load_test_set(path, cfg.blackbox.d())?),
        (TestSource::Generate(size), TestMode::Fixed) => Some(generate_test_set(
            &cfg.blackbox,
            *size,
            &mut ChaCha8Rng::seed_from_u64(rep_seed(cfg.seed, usize::MAX - 1)),
        )?),
        (TestSource::Generate(_), TestMode::Redraw) => None,
    };
    (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let test = match (&fixed, &cfg.test) {
                (Some(t), _) => t.clone(),
                (None, TestSource::Generate(size)) => {
                    let mut r = ChaCha8Rng::seed_from_u64(rep_seed(cfg.seed, rep));
                    r.set_stream(u64::MAX);
                    generate_test_set(&cfg.blackbox, *size, &mut r)?
                }
                (None, TestSource::File(_)) => unreachable!("file test sets are always loaded"),
            };
            Ok(run_campaign(cfg, rep, &test))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// History table: `step, n, x1..xd, y, rmse, score, seconds`, with a leading
/// `rep` column when several repetitions share the file. Step 0 carries the
/// initial-design metrics.
pub fn write_history<W: Write>(out: &mut W, outcomes: &[CampaignOutcome]) -> Result<()> {
    let Some(first) = outcomes.first() else {
        return Ok(());
    };
    let multi = outcomes.len() > 1;
    let d = first.history.d;
    let mut header: Vec<String> = Vec::new();
    if multi {
        header.push("rep".into());
    }
    header.extend(["step".to_string(), "n".to_string()]);
    header.extend(input_header(d));
    header.extend(["y", "rmse", "score", "seconds"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for o in outcomes {
        let h = &o.history;
        let prefix = |fields: Vec<String>| {
            let mut row = Vec::new();
            if multi {
                row.push(o.rep.to_string());
            }
            row.extend(fields);
            row.join(",")
        };
        let mut row = vec!["0".to_string(), h.n0.to_string()];
        row.extend(std::iter::repeat(String::new()).take(d + 1));
        row.push(opt(h.initial.map(|m| m.rmse)));
        row.push(opt(h.initial.map(|m| m.score)));
        row.push(String::new());
        writeln!(out, "{}", prefix(row))?;
        for r in &h.records {
            let mut row = vec![r.step.to_string(), r.n.to_string()];
            row.extend(r.x.iter().map(|&v| fmt_f64(v)));
            row.push(fmt_f64(r.y));
            row.push(opt(r.metrics.map(|m| m.rmse)));
            row.push(opt(r.metrics.map(|m| m.score)));
            row.push(opt(r.seconds));
            writeln!(out, "{}", prefix(row))?;
        }
    }
    Ok(())
}
