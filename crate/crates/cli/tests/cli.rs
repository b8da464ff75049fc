use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgp_core::campaign::CampaignFile;

fn dgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgp")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_training(dir: &Path) -> PathBuf {
    let path = dir.join("train.csv");
    fs::write(&path, "x1,y\n0.0,0.3\n0.25,-0.4\n0.5,0.9\n0.75,0.1\n1.0,-0.2\n").unwrap();
    path
}

const SHORT_CHAIN: [&str; 6] = ["--set", "iters=50", "--set", "burn=10", "--set", "thin=3"];

fn fit_toy(dir: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let train = toy_training(dir);
    let out = dir.join(name);
    let mut args = vec!["fit", "--in", s(&train), "--out", s(&out), "--layers", "1", "--seed", "4"];
    args.extend_from_slice(&SHORT_CHAIN);
    args.extend_from_slice(extra);
    (dgp(&args), out)
}

#[test]
fn fit_missing_input_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("model");
    let o = dgp(&["fit", "--in", s(&dir.path().join("nope.csv")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!out.exists());
}

#[test]
fn fit_writes_trimmed_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (o, model) = fit_toy(dir.path(), "model", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("retained=14") && summary.contains("theta_y=") && summary.contains("tau2hat_mean="));
    let manifest = fs::read_to_string(model.join("manifest.toml")).unwrap();
    // ceil((50 − 10) / 3)
    assert!(manifest.contains("retained = 14"), "{manifest}");
    let trace = fs::read_to_string(model.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 15);
}

#[test]
fn fit_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = fit_toy(dir.path(), "a", &[]);
    let (_, b) = fit_toy(dir.path(), "b", &[]);
    let (_, c) = fit_toy(dir.path(), "c", &["--set", "seed=5"]);
    let trace = |p: &Path| fs::read(p.join("trace.csv")).unwrap();
    assert_eq!(trace(&a), trace(&b));
    assert_ne!(trace(&a), trace(&c));
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fit.toml");
    fs::write(&cfg, "layers = 2\niters = 80\nburn = 20\nthin = 1\n").unwrap();
    let train = toy_training(dir.path());
    let out = dir.path().join("m");
    let o = dgp(&["fit", "--in", s(&train), "--out", s(&out), "--config", s(&cfg), "--layers", "1", "--set", "iters=60", "-q"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("layers = 1"));
    assert!(manifest.contains("retained = 40"), "{manifest}");
}

#[test]
fn fit_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let train = toy_training(dir.path());
    let out = dir.path().join("m");
    let o = dgp(&["fit", "--in", s(&train), "--out", s(&out), "--set", "burnin=3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("burnin"));
    let o = dgp(&["fit", "--in", s(&train), "--out", s(&out), "--set", "iters=10", "--set", "burn=10"]);
    assert_eq!(code(&o), 2);
    let o = dgp(&["fit", "--in", s(&train), "--out", s(&out), "--layers", "4"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn predict_reports_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit_toy(dir.path(), "model", &[]);
    let test = dir.path().join("test.csv");
    fs::write(&test, "x1\n0.1\n0.6\n0.9\n").unwrap();
    let pred = dir.path().join("pred.csv");
    let o = dgp(&["predict", "--model", s(&model), "--in", s(&test), "--out", s(&pred)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mean,var,lower,upper"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let half = 1.6448536269514722 * r[1].sqrt();
        assert!(r[1] > 0.0);
        assert!((r[2] - (r[0] - half)).abs() < 1e-9 && (r[3] - (r[0] + half)).abs() < 1e-9);
    }

    let again = dir.path().join("pred2.csv");
    dgp(&["predict", "--model", s(&model), "--in", s(&test), "--out", s(&again)]);
    assert_eq!(fs::read(&pred).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn predict_interpolates_in_deterministic_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (o, model) = fit_toy(dir.path(), "model", &["--deterministic"]);
    assert_eq!(code(&o), 0);
    let test = dir.path().join("test.csv");
    fs::write(&test, "x1\n0.0\n0.25\n0.5\n0.75\n1.0\n").unwrap();
    let pred = dir.path().join("pred.csv");
    let o = dgp(&["predict", "--model", s(&model), "--in", s(&test), "--out", s(&pred), "--latent", "mean", "--noise-free"]);
    assert_eq!(code(&o), 0);
    let means: Vec<f64> = fs::read_to_string(&pred)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    for (m, y) in means.iter().zip([0.3, -0.4, 0.9, 0.1, -0.2]) {
        assert!((m - y).abs() < 1e-4, "{m} vs {y}");
    }
}

#[test]
fn predict_dimension_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit_toy(dir.path(), "model", &[]);
    let test = dir.path().join("test.csv");
    fs::write(&test, "x1,x2\n0.1,0.2\n").unwrap();
    let o = dgp(&["predict", "--model", s(&model), "--in", s(&test), "--out", s(&dir.path().join("p.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("p.csv").exists());
}

#[test]
fn acquire_writes_surface_and_choice() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit_toy(dir.path(), "model", &[]);
    let cand = dir.path().join("cand.csv");
    fs::write(&cand, "x1\n0.1\n0.4\n0.6\n0.95\n").unwrap();
    for criterion in ["alc", "imse"] {
        let surface = dir.path().join(format!("{criterion}.csv"));
        let choice = dir.path().join(format!("{criterion}_choice.csv"));
        let o = dgp(&[
            "acquire", "--model", s(&model), "--in", s(&cand), "--out", s(&surface), "--choice", s(&choice),
            "--criterion", criterion,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let surf = fs::read_to_string(&surface).unwrap();
        assert_eq!(surf.lines().next(), Some(format!("x1,{criterion}").as_str()));
        assert_eq!(surf.lines().count(), 5);
        let values: Vec<f64> = surf.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        let picked = fs::read_to_string(&choice).unwrap();
        assert_eq!(picked.lines().count(), 2);
        let idx: usize = picked.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
        let best = if criterion == "alc" {
            values.iter().cloned().fold(f64::MIN, f64::max)
        } else {
            values.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert_eq!(values[idx], best);
    }
}

#[test]
fn acquire_without_candidates_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit_toy(dir.path(), "model", &[]);
    let cand = dir.path().join("cand.csv");
    fs::write(&cand, "x1\n").unwrap();
    let o = dgp(&[
        "acquire", "--model", s(&model), "--in", s(&cand), "--out", s(&dir.path().join("a.csv")), "--choice",
        s(&dir.path().join("b.csv")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn campaign_smoke_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.csv");
    let o = dgp(&["campaign", "--config", s(&configs().join("smoke.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "step,n,x1,y,rmse,score,seconds");
    assert!(lines[1].starts_with("0,6,,,"));
}

#[test]
fn campaign_history_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dgp(&[
            "campaign", "--config", s(&configs().join("smoke.toml")), "--out", s(&out), "--layers", "2", "--set",
            "n_final=8", "--set", "iters=60", "--set", "burn=20", "--criterion", "imse", "--seed", "11",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn campaign_bad_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n0 = 5\nnfinal = 9\n").unwrap();
    let out = dir.path().join("h.csv");
    let o = dgp(&["campaign", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nfinal"));
    assert!(!out.exists());
    let o = dgp(&["campaign", "--config", s(&configs().join("smoke.toml")), "--out", s(&out), "--set", "n_final=2"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_final"));
}

#[test]
fn campaign_abort_keeps_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let test = dir.path().join("test.csv");
    fs::write(&test, "x1,y\n0.5,0.0\n").unwrap();
    let cfg = dir.path().join("dies.toml");
    fs::write(
        &cfg,
        "blackbox = \"external\"\ncommand = \"for i in 1 2 3 4 5; do read l; echo 0.$i; done\"\ndomain_lo = [0.0]\ndomain_hi = [1.0]\nn0 = 4\nn_final = 7\nn_cand = 10\nlayers = 1\nfirst_iters = 40\nfirst_burn = 10\niters = 20\nburn = 5\ntest_file = \"test.csv\"\n",
    )
    .unwrap();
    let out = dir.path().join("h.csv");
    let o = dgp(&["campaign", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("repetition 0"));
    // header, initial metrics, one acquisition
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn campaign_external_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.csv");
    let o = dgp(&["campaign", "--config", s(&configs().join("external_1d.toml")), "--out", s(&out), "-q"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn shipped_protocol_configs_resolve() {
    let cfg = CampaignFile::load(&configs().join("paper_1d.toml")).unwrap().resolve().unwrap();
    assert_eq!((cfg.n0, cfg.n_final, cfg.n_cand), (10, 35, 100));
    assert_eq!(cfg.criterion, dgp_core::Criterion::Alc);
    assert_eq!(cfg.blackbox.noise_sd, 0.1);
    assert_eq!((cfg.first_fit.iters, cfg.first_fit.burn, cfg.first_fit.thin), (10_000, 6_000, 2));
    assert_eq!((cfg.refit.iters, cfg.refit.burn, cfg.refit.thin), (2_500, 500, 2));
    let cfg = CampaignFile::load(&configs().join("exp_2d.toml")).unwrap().resolve().unwrap();
    assert_eq!(cfg.blackbox.d(), 2);
}

#[test]
fn selfcheck_passes_and_catches_perturbation() {
    let o = dgp(&["selfcheck", "--quick"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("ALC vs brute force") && !table.contains("FAIL"));

    let o = dgp(&["selfcheck", "--config", s(&configs().join("selfcheck_perturbed.toml"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dgp(&[])), 2);
    assert_eq!(code(&dgp(&["fit"])), 2);
    assert_eq!(code(&dgp(&["acquire", "--criterion", "ei"])), 2);
}
