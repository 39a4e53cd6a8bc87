use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;
use tsgan::data_io;
use tsgan::PathBundle;

const TINY: &str = r#"
preset = "desk"
[train]
iterations = 3
batch_size = 4
n_critic = 1
[generator]
l = 16
f = 9
layers = 2
d_h = 8
n_a = 8
n_m = 8
[discriminator]
l = 16
d_h = 8
n_a = 8
n_m = 8
"#;

fn tsgan(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsgan")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

/// Deterministic bumpy returns with volatility regimes.
fn returns(n: usize) -> Vec<f64> {
    let mut state = 0x2545f4914f6cdd1du64;
    (0..n)
        .map(|t| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            let vol = 0.01 * (1.5 + (t as f64 / 40.0).sin());
            vol * u * 3.0
        })
        .collect()
}

fn price_csv(dir: &Path, n: usize) -> PathBuf {
    let mut s = String::from("date,close\n");
    let mut p = 100.0;
    let start = chrono_like_date(0);
    s.push_str(&format!("{start},{p}\n"));
    for (i, r) in returns(n).into_iter().enumerate() {
        p *= f64::exp(r);
        s.push_str(&format!("{},{p}\n", chrono_like_date(i + 1)));
    }
    let path = dir.join("prices.csv");
    std::fs::write(&path, s).unwrap();
    path
}

/// Consecutive calendar days starting 2000-01-01, enough for a few thousand rows.
fn chrono_like_date(i: usize) -> String {
    let days = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let (mut y, mut left) = (2000, i);
    loop {
        let leap = y % 4 == 0 && (y % 100 != 0 || y % 400 == 0);
        let len = if leap { 366 } else { 365 };
        if left < len {
            break;
        }
        left -= len;
        y += 1;
    }
    let leap = y % 4 == 0 && (y % 100 != 0 || y % 400 == 0);
    let mut m = 0;
    loop {
        let len = days[m] + usize::from(m == 1 && leap);
        if left < len {
            break;
        }
        left -= len;
        m += 1;
    }
    format!("{y}-{:02}-{:02}", m + 1, left + 1)
}

const MATURITIES: [&str; 4] = ["1m", "2m", "3m", "6m"];
const STRIKES: [u32; 7] = [85, 90, 95, 100, 105, 110, 115];

fn surface_csv(dir: &Path, rows: usize) -> PathBuf {
    let mut s = String::from("date");
    for m in MATURITIES {
        for k in STRIKES {
            s.push_str(&format!(",{m}-{k}%"));
        }
    }
    s.push('\n');
    let r = returns(rows);
    let mut level = 0.0;
    for (t, x) in r.iter().enumerate() {
        level = 0.97 * level + 3.0 * x;
        s.push_str(&chrono_like_date(t));
        for (mi, _) in MATURITIES.iter().enumerate() {
            for k in STRIKES {
                let skew = 0.3 * (k as f64 / 100.0 - 1.0).powi(2) - 0.1 * (k as f64 / 100.0 - 1.0);
                let vol = (0.2 + skew + 0.005 * mi as f64) * f64::exp(level);
                s.push_str(&format!(",{vol}"));
            }
        }
        s.push('\n');
    }
    let path = dir.join("surfaces.csv");
    std::fs::write(&path, s).unwrap();
    path
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn train_is_repeatable_and_writes_artifacts() {
    let (dir, cfg) = setup();
    let data = price_csv(dir.path(), 300);
    let cfg = cfg.to_str().unwrap();
    for run in ["a", "b"] {
        ok(&tsgan(&["train", "--config", cfg, "--data", data.to_str().unwrap(), "--seed", "4", "--out", run], dir.path()));
    }
    for f in ["generator.ckpt", "discriminator.ckpt", "history.ndjson", "run.toml"] {
        assert!(dir.path().join("a").join(f).metadata().unwrap().len() > 0, "{f}");
    }
    let a = std::fs::read(dir.path().join("a/history.ndjson")).unwrap();
    let b = std::fs::read(dir.path().join("b/history.ndjson")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    ok(&tsgan(&["train", "--config", cfg, "--data", data.to_str().unwrap(), "--seed", "5", "--out", "c"], dir.path()));
    assert_ne!(std::fs::read(dir.path().join("c/history.ndjson")).unwrap(), b);
}

#[test]
fn missing_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsgan(&["train", "--data", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
    assert_eq!(tsgan(&["generate", "--model", "missing.ckpt"], dir.path()).status.code(), Some(2));
    assert_eq!(tsgan(&["report", "--out", "empty"], dir.path()).status.code(), Some(2));
    assert_eq!(tsgan(&["train", "--config", "missing.toml", "--data", "x"], dir.path()).status.code(), Some(2));
}

#[test]
fn invalid_specs_fail_before_training() {
    let (dir, cfg) = setup();
    let data = price_csv(dir.path(), 300);
    let bad = std::fs::read_to_string(&cfg).unwrap().replace("[discriminator]\nl = 16", "[discriminator]\nl = 16\nlayers = 0");
    std::fs::write(&cfg, bad).unwrap();
    let out = tsgan(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("run/history.ndjson").exists());
    let typo = "[generator]\nwidth = 3\n";
    std::fs::write(&cfg, typo).unwrap();
    let out = tsgan(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn generate_evaluate_and_report() {
    let (dir, cfg) = setup();
    let data = price_csv(dir.path(), 300);
    let (cfg, data_s) = (cfg.to_str().unwrap(), data.to_str().unwrap());
    ok(&tsgan(&["train", "--config", cfg, "--data", data_s, "--out", "run"], dir.path()));
    ok(&tsgan(&["generate", "--out", "run", "--paths", "3", "--length", "260", "--seed", "1"], dir.path()));
    let first = std::fs::read(dir.path().join("run/bundle.bin")).unwrap();
    ok(&tsgan(&["generate", "--out", "run", "--paths", "3", "--length", "260", "--seed", "1"], dir.path()));
    assert_eq!(std::fs::read(dir.path().join("run/bundle.bin")).unwrap(), first);
    let b = data_io::bundle_from_bytes(&first).unwrap();
    assert_eq!(b.paths().dim(), (3, 260, 1));

    ok(&tsgan(&["generate", "--out", "minimal", "--model", "run/generator.ckpt", "--paths", "1", "--length", "16"], dir.path()));
    let b = data_io::load_bundle(dir.path().join("minimal/bundle.bin")).unwrap();
    assert_eq!(b.paths().dim(), (1, 16, 1));

    ok(&tsgan(&["evaluate", "--out", "run", "--data", data_s], dir.path()));
    let report: tsgan::metrics::ScoreReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/scores.json")).unwrap()).unwrap();
    let keys: Vec<&str> = report.keys().collect();
    assert_eq!(
        keys,
        ["W1(1)", "W1(5)", "W1(20)", "W1(100)", "W1(200)", "skewness", "kurtosis", "ACF", "ACF(abs)", "ACF(sq)", "Lev"]
    );
    for plot in ["density.svg", "acf.svg"] {
        let text = std::fs::read_to_string(dir.path().join("run").join(plot)).unwrap();
        assert!(text.starts_with("<svg") && text.len() > 1000, "{plot}");
    }

    ok(&tsgan(&["report", "--out", "run"], dir.path()));
    let md = std::fs::read_to_string(dir.path().join("run/report.md")).unwrap();
    for section in ["## Configuration", "## Training", "## Scores", "| ACF(abs) |"] {
        assert!(md.contains(section), "{section}");
    }
}

#[test]
fn real_against_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = price_csv(dir.path(), 400);
    let r = data_io::to_log_returns(&data_io::read_price_csv(&data).unwrap()).unwrap();
    let r32: Vec<f64> = r.iter().map(|&v| v as f32 as f64).collect();
    let bundle = PathBundle::new(Array3::from_shape_vec((1, r.len(), 1), r32.clone()).unwrap(), 0, "real").unwrap();
    data_io::save_bundle(dir.path().join("real.bin"), &bundle).unwrap();
    // rewrite the prices so the reconstructed returns match the stored f32 values
    let mut s = String::from("date,close\n");
    let mut p = 100.0f64;
    s.push_str(&format!("{},{p:e}\n", chrono_like_date(0)));
    for (i, x) in r32.iter().enumerate() {
        p *= x.exp();
        s.push_str(&format!("{},{p:e}\n", chrono_like_date(i + 1)));
    }
    std::fs::write(&data, s).unwrap();
    ok(&tsgan(&["evaluate", "--data", data.to_str().unwrap(), "--bundle", "real.bin", "--out", "eval"], dir.path()));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval/scores.json")).unwrap()).unwrap();
    for (k, v) in report["scores"].as_object().unwrap() {
        assert!(v.as_f64().unwrap().abs() < 1e-9, "{k} = {v}");
    }
}

fn surface_bundle(dir: &Path, n: usize, t: usize, bad_every: usize) -> PathBuf {
    let grid = data_io::load_surface_csv(dir.join("surfaces.csv")).unwrap();
    let mut paths = Array3::zeros((n, t, 28));
    for i in 0..n {
        for s in 0..t {
            let row = grid.data().row(s % grid.data().nrows());
            for j in 0..28 {
                paths[[i, s, j]] = row[j];
            }
            if bad_every > 0 && (i * t + s).is_multiple_of(bad_every) {
                for j in 21..28 {
                    paths[[i, s, j]] = 0.05f64.ln();
                }
            }
        }
    }
    let path = dir.join("surfaces.bin");
    data_io::save_bundle(&path, &PathBundle::new(paths, 0, "fixture").unwrap()).unwrap();
    path
}

#[test]
fn repair_reports_rate_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let data = surface_csv(dir.path(), 60);
    surface_bundle(dir.path(), 4, 25, 10);
    let d = data.to_str().unwrap();
    ok(&tsgan(&["repair-arbitrage", "--data", d, "--bundle", "surfaces.bin", "--out", "fixed"], dir.path()));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("fixed/arbitrage.json")).unwrap()).unwrap();
    assert_eq!(summary["surfaces"], 100);
    assert_eq!(summary["rate"], 0.1);
    assert_eq!(summary["rate_after"], 0.0);

    let out = Command::new(env!("CARGO_BIN_EXE_tsgan"))
        .args(["repair-arbitrage", "--data", d, "--bundle", "fixed/repaired.bin", "--out", "again"])
        .env("TSGAN_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    ok(&out);
    let again: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("again/arbitrage.json")).unwrap()).unwrap();
    assert_eq!(again["rate"], 0.0);
    assert_eq!(
        std::fs::read(dir.path().join("again/repaired.bin")).unwrap(),
        std::fs::read(dir.path().join("fixed/repaired.bin")).unwrap()
    );
}

#[test]
fn clean_surfaces_pass_repair_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = surface_csv(dir.path(), 30);
    surface_bundle(dir.path(), 2, 10, 0);
    ok(&tsgan(&["repair-arbitrage", "--data", data.to_str().unwrap(), "--bundle", "surfaces.bin", "--out", "r"], dir.path()));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r/arbitrage.json")).unwrap()).unwrap();
    assert_eq!(summary["rate"], 0.0);
    let a = data_io::load_bundle(dir.path().join("surfaces.bin")).unwrap();
    let b = data_io::load_bundle(dir.path().join("r/repaired.bin")).unwrap();
    assert_eq!(a.paths(), b.paths());
}

#[test]
fn surface_pipeline_end_to_end() {
    let (dir, cfg) = setup();
    let data = surface_csv(dir.path(), 120);
    let (cfg, d) = (cfg.to_str().unwrap(), data.to_str().unwrap());
    ok(&tsgan(&["train", "--config", cfg, "--mode", "surface", "--data", d, "--out", "s"], dir.path()));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("s/surface.json")).unwrap()).unwrap();
    assert_eq!(meta["pca_singular_values"].as_array().unwrap().len(), 10);
    ok(&tsgan(&["generate", "--out", "s", "--paths", "2", "--length", "80"], dir.path()));
    let b = data_io::load_bundle(dir.path().join("s/bundle.bin")).unwrap();
    assert_eq!(b.paths().dim(), (2, 80, 28));
    ok(&tsgan(&["evaluate", "--out", "s", "--data", d], dir.path()));
    assert!(dir.path().join("s/crosscorr.svg").metadata().unwrap().len() > 1000);
    let scores: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("s/scores.json")).unwrap()).unwrap();
    assert!(scores["scores"]["arbitrage rate"].is_number());

    ok(&tsgan(&["train", "--config", cfg, "--mode", "surface", "--feature", "returns", "--data", d, "--out", "r"], dir.path()));
    let run = std::fs::read_to_string(dir.path().join("r/run.toml")).unwrap();
    assert!(run.contains("augment = \"returns\""), "{run}");
}
