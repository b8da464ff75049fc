use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use dgp_core::campaign::{write_history, CampaignFile, TestSource};
use dgp_core::data::{read_dataset, read_design, write_row};
use dgp_core::dgp::acceptance_rates;
use dgp_core::sampler::PriorSpec;
use dgp_core::selfcheck::{run_selfcheck, SelfcheckOptions};
use dgp_core::{
    evaluate_candidates, fit as fit_model, load_model, predict as predict_model, run_repetitions, save_model,
    Coding, Criterion, Error, LatentMode, Layers, ModelConfig, PredictOptions, ProposalSpec, Result,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::overrides::{load_table, Overrides};
use crate::ModelFlags;

/// Keys accepted by `fit --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitFile {
    layers: Option<u8>,
    p: Option<usize>,
    deterministic: Option<bool>,
    iters: Option<usize>,
    burn: Option<usize>,
    thin: Option<usize>,
    proposal_l: Option<f64>,
    proposal_u: Option<f64>,
    g_rate: Option<f64>,
    theta_y_rate: Option<f64>,
    theta_w_rate: Option<f64>,
    theta_z_rate: Option<f64>,
    seed: Option<u64>,
}

impl FitFile {
    fn resolve(&self) -> Result<(ModelConfig, u64)> {
        let layers = Layers::try_from(self.layers.unwrap_or(2)).map_err(Error::Config)?;
        let mut cfg = ModelConfig::new(layers);
        cfg.p = self.p;
        cfg.deterministic = self.deterministic.unwrap_or(false);
        cfg.iters = self.iters.unwrap_or(cfg.iters);
        cfg.burn = self.burn.unwrap_or(cfg.burn);
        cfg.thin = self.thin.unwrap_or(cfg.thin);
        cfg.proposal = ProposalSpec::new(self.proposal_l.unwrap_or(1.0), self.proposal_u.unwrap_or(2.0))
            .map_err(|e| Error::Config(format!("proposal_l/proposal_u: {e}")))?;
        let rate = |key: &str, v: Option<f64>, default: PriorSpec| match v {
            Some(r) => PriorSpec::new(r).map_err(|e| Error::Config(format!("{key}: {e}"))),
            None => Ok(default),
        };
        cfg.priors.g = rate("g_rate", self.g_rate, cfg.priors.g)?;
        cfg.priors.theta_y = rate("theta_y_rate", self.theta_y_rate, cfg.priors.theta_y)?;
        cfg.priors.theta_w = rate("theta_w_rate", self.theta_w_rate, cfg.priors.theta_w)?;
        cfg.priors.theta_z = rate("theta_z_rate", self.theta_z_rate, cfg.priors.theta_z)?;
        cfg.validate()?;
        Ok((cfg, self.seed.unwrap_or(1)))
    }
}

fn merged<T: serde::de::DeserializeOwned>(flags: &ModelFlags, extra: impl FnOnce(&mut Overrides)) -> Result<T> {
    let mut o = Overrides::new(load_table(flags.config.as_deref())?);
    o.set("seed", flags.seed.map(|s| s as i64))
        .set("layers", flags.layers.map(i64::from))
        .set("p", flags.p.map(|p| p as i64))
        .set("deterministic", flags.deterministic.then_some(true));
    extra(&mut o);
    o.assignments(&flags.set)?;
    o.into_config()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn fit(input: &Path, out: &Path, flags: &ModelFlags, quiet: bool) -> Result<u8> {
    let (cfg, seed) = merged::<FitFile>(flags, |_| {})?.resolve()?;
    let data = read_dataset(input)?;
    let coding = Coding::from_data(&data);
    let model = fit_model(&cfg, coding.code(&data)?, seed)?;
    save_model(&model, Some(&coding), out)?;
    if !quiet {
        let states = &model.trace.states;
        let tau2 = states.iter().map(|s| s.tau2hat).sum::<f64>() / states.len() as f64 * coding.y_sd * coding.y_sd;
        let rates: Vec<String> = acceptance_rates(&model.trace)
            .iter()
            .map(|(k, r)| format!("{k}={r:.3}"))
            .collect();
        println!(
            "retained={} acceptance: {} tau2hat_mean={tau2:.6}",
            model.trace.len(),
            rates.join(" ")
        );
    }
    Ok(0)
}

pub fn predict(model_dir: &Path, input: &Path, out: &Path, seed: u64, latent: LatentMode, noise_free: bool) -> Result<u8> {
    let (model, coding) = load_model(model_dir)?;
    let test = read_design(input)?;
    if test.ncols() != model.data.d() {
        return Err(Error::DimensionMismatch {
            context: "test input columns",
            expected: model.data.d(),
            found: test.ncols(),
        });
    }
    let coded = match &coding {
        Some(c) => c.code_x(&test)?,
        None => test.clone(),
    };
    let opts = PredictOptions {
        pointwise: true,
        noise_free,
        latent_mode: latent,
    };
    let pred = predict_model(&model, &coded, opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (mean, var) = match &coding {
        Some(c) => (c.decode_mean(&pred.mean), c.decode_var(&pred.var)),
        None => (pred.mean, pred.var),
    };
    let z = Normal::standard().inverse_cdf(0.95);
    let mut f = create(out)?;
    writeln!(f, "mean,var,lower,upper")?;
    for (m, v) in mean.iter().zip(var.iter()) {
        let half = z * v.max(0.0).sqrt();
        write_row(&mut f, [*m, *v, m - half, m + half])?;
    }
    f.flush()?;
    Ok(0)
}

pub fn acquire(
    model_dir: &Path,
    input: &Path,
    out: &Path,
    choice: &Path,
    criterion: Criterion,
    seed: u64,
    quiet: bool,
) -> Result<u8> {
    let (model, coding) = load_model(model_dir)?;
    let cand = read_design(input)?;
    if cand.nrows() == 0 {
        return Err(Error::Domain(format!("{}: no candidates", input.display())));
    }
    let coded = match &coding {
        Some(c) => c.code_x(&cand)?,
        None => cand.clone(),
    };
    let result = evaluate_candidates(&model, &coded, criterion, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut f = create(out)?;
    dgp_core::acquisition::write_surface(&mut f, &cand, &result)?;
    f.flush()?;
    let mut f = create(choice)?;
    dgp_core::acquisition::write_choice(&mut f, &cand, &result)?;
    f.flush()?;
    if !quiet {
        let x: Vec<String> = cand.row(result.chosen).iter().map(|v| format!("{v}")).collect();
        println!(
            "chosen candidate {} at ({}) with {criterion} = {}",
            result.chosen,
            x.join(", "),
            result.values[result.chosen]
        );
    }
    Ok(0)
}

pub fn campaign(out: &Path, criterion: Option<Criterion>, flags: &ModelFlags, quiet: bool) -> Result<u8> {
    let mut file: CampaignFile = merged(flags, |o| {
        o.set("criterion", criterion.map(|c| c.to_string()));
    })?;
    // test files are relative to the config that names them
    if let (Some(t), Some(dir)) = (&file.test_file, flags.config.as_deref().and_then(Path::parent)) {
        if t.is_relative() {
            file.test_file = Some(dir.join(t));
        }
    }
    let cfg = file.resolve()?;
    if let TestSource::File(p) = &cfg.test {
        if !p.exists() {
            return Err(Error::Config(format!("test_file: {} does not exist", p.display())));
        }
    }
    let outcomes = run_repetitions(&cfg)?;
    let mut f = create(out)?;
    write_history(&mut f, &outcomes)?;
    f.flush()?;
    let mut code = 0;
    for o in &outcomes {
        if let Some(e) = &o.error {
            eprintln!("error: repetition {} stopped after {} acquisitions: {e}", o.rep, o.history.records.len());
            code = 1;
        } else if !quiet {
            let h = &o.history;
            let last = h.records.last().and_then(|r| r.metrics).or(h.initial);
            let mut line = format!("rep {}: n={}", o.rep, h.n0 + h.records.len());
            if let Some(m) = last {
                line += &format!(" rmse={:.6} score={:.6}", m.rmse, m.score);
            }
            if h.d == 1 && !h.records.is_empty() {
                line += &format!(" share_below_0.33={:.3}", h.region_fraction(0.0, 0.33));
            }
            println!("{line}");
        }
    }
    Ok(code)
}

pub fn selfcheck(config: Option<&Path>, seed: Option<u64>, quick: bool, set: &[String], quiet: bool) -> Result<u8> {
    let mut o = Overrides::new(load_table(config)?);
    o.set("seed", seed.map(|s| s as i64)).set("quick", quick.then_some(true));
    o.assignments(set)?;
    let opts: SelfcheckOptions = o.into_config()?;
    let checks = run_selfcheck(&opts);
    let all = checks.iter().all(|c| c.passed());
    if !quiet || !all {
        println!("{:<24} {:>9} {:>12} {:>12} {:>8}  result", "check", "instances", "worst", "tolerance", "seconds");
        for c in &checks {
            println!(
                "{:<24} {:>9} {:>12.3e} {:>12.1e} {:>8.2}  {}",
                c.name,
                c.instances,
                c.worst,
                c.tolerance,
                c.seconds,
                if c.passed() { "pass" } else { "FAIL" }
            );
        }
    }
    Ok(if all { 0 } else { 1 })
}
