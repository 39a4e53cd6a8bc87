use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsgan::data_io;
use tsgan::metrics::{self, CorrKind, ScoreReport};
use tsgan::networks::{build_discriminator, build_generator, NetworkInstance};
use tsgan::surfaces::{self, PcaModel, SurfaceGrid};
use tsgan::training::{self, HistoryRecord, TrainConfig};
use tsgan::{PathBundle, TimeSeriesMatrix};

use crate::config::*;
use crate::plots;

pub const THREADS_ENV: &str = "TSGAN_THREADS";

fn require(path: &Path) -> Result<()> {
    std::fs::metadata(path).with_context(|| format!("cannot access {}", path.display()))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}

/// Surface geometry and optional PCA model stored next to a trained generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurfaceMeta {
    pub feature: Feature,
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub pca_v: Option<Vec<Vec<f64>>>,
    pub pca_singular_values: Option<Vec<f64>>,
}

impl SurfaceMeta {
    fn pca(&self) -> Option<PcaModel> {
        let rows = self.pca_v.as_ref()?;
        let k = rows.first().map_or(0, Vec::len);
        let v = Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j]);
        Some(PcaModel { v, singular_values: self.pca_singular_values.clone()?.into() })
    }
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub family: Option<FamilyArg>,
    pub preset: Option<Preset>,
    pub feature: Option<Feature>,
    pub components: Option<usize>,
    pub iterations: Option<usize>,
}

pub fn resolve_train(file: &FileConfig, args: TrainArgs, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mode = args.mode.or(file.mode).unwrap_or(Mode::Index);
    let family = args.family.or(file.family).unwrap_or(FamilyArg::Ttgan);
    let preset = args.preset.or(file.preset).unwrap_or(Preset::Desk);
    let feature = args.feature.or(file.feature).unwrap_or(Feature::Pca);
    let components = args.components.or(file.components).unwrap_or(surfaces::DEFAULT_PCA_COMPONENTS);
    let data = args.data.or_else(|| file.data.clone()).context("no data file given (use --data or `data` in the config)")?;
    let seed = seed.or(file.seed).unwrap_or(0);
    let out = out.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let base = match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    let mut train = train_overrides(&base, &file.train)?;
    if let Some(n) = args.iterations {
        train.iterations = n;
    }
    train.seed = seed;
    train.snapshot_dir.get_or_insert_with(|| out.clone());
    train.validate()?;
    // Channel count is known only after loading; specs are finalized in `train`.
    let (generator, discriminator) = base_specs(preset, family.into(), mode, 1);
    Ok(RunConfig { mode, family, preset, feature, components, data, seed, out, train, generator, discriminator })
}

fn load_training_series(cfg: &RunConfig) -> Result<(TimeSeriesMatrix, Option<SurfaceMeta>)> {
    require(&cfg.data)?;
    match cfg.mode {
        Mode::Index => {
            let prices = data_io::read_price_csv(&cfg.data)?;
            let r = data_io::to_log_returns(&prices)?;
            let st = data_io::dataset_stats(&r)?;
            eprintln!(
                "returns: T_x={} mean={:.3e} std={:.3e} skewness={:.4} kurtosis={:.4}",
                st.t_x, st.mean, st.std, st.skewness, st.kurtosis
            );
            Ok((TimeSeriesMatrix::from_column(&r)?, None))
        }
        Mode::Surface => {
            let grid = data_io::load_surface_csv(&cfg.data)?;
            let mut meta = SurfaceMeta {
                feature: cfg.feature,
                strikes: grid.strikes().to_vec(),
                maturities: grid.maturities().to_vec(),
                pca_v: None,
                pca_singular_values: None,
            };
            let series = match cfg.feature {
                Feature::Returns => grid.data().clone(),
                Feature::Pca => {
                    let (model, comps) = surfaces::pca_fit(grid.data(), cfg.components)?;
                    meta.pca_v = Some(model.v.rows().into_iter().map(|r| r.to_vec()).collect());
                    meta.pca_singular_values = Some(model.singular_values.to_vec());
                    comps
                }
            };
            eprintln!("surfaces: T={} grid {}x{}, training width {}", grid.data().nrows(), grid.n_maturities(), grid.n_strikes(), series.ncols());
            Ok((TimeSeriesMatrix::new(series)?, Some(meta)))
        }
    }
}

pub fn train(file: &FileConfig, mut cfg: RunConfig) -> Result<()> {
    let (series, meta) = load_training_series(&cfg)?;
    let d = series.channels();
    let (g, mut dsc) = base_specs(cfg.preset, cfg.family.into(), cfg.mode, d);
    dsc.augment = augment_for(cfg.mode, cfg.feature);
    cfg.generator = generator_overrides(&g, &file.generator)?;
    cfg.discriminator = discriminator_overrides(&dsc, &file.discriminator)?;
    cfg.generator.validate()?;
    cfg.discriminator.validate()?;

    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let data = training::make_windows(&series, cfg.generator.l)?;
    let mut g = build_generator(&cfg.generator, cfg.seed)?;
    let mut dnet = build_discriminator(&cfg.discriminator, cfg.seed.wrapping_add(1))?;
    eprintln!(
        "training {:?}: {} windows of length {}, {} generator / {} discriminator parameters",
        cfg.family,
        data.len(),
        cfg.generator.l,
        g.param_count(),
        dnet.param_count()
    );
    let every = (cfg.train.iterations / 20).max(1);
    let history = training::train_with(&mut g, &mut dnet, &data, &cfg.train, |p| {
        let r = p.record;
        if r.iter % every == 0 || r.iter == p.total {
            eprintln!("iter {}/{}: loss_G {:.4} loss_D {:.4}", r.iter, p.total, r.loss_g, r.loss_d);
        }
    })?;

    g.save(cfg.out.join("generator.ckpt"))?;
    dnet.save(cfg.out.join("discriminator.ckpt"))?;
    write(&cfg.out.join("history.ndjson"), history.to_ndjson()?)?;
    write(&cfg.out.join("run.toml"), toml::to_string(&cfg)?)?;
    if let Some(meta) = meta {
        write(&cfg.out.join("surface.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

pub fn generate(model: &Path, n: usize, t: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    require(model)?;
    let g = NetworkInstance::load(model)?;
    let spec = g.generator_spec().context("checkpoint does not hold a generator")?;
    ensure!(n >= 1 && t >= 1, "need at least one path of positive length");
    let mut bundle = training::sample_paths(&g, n, t, seed)?;
    let meta_path = model.with_file_name("surface.json");
    if meta_path.exists() {
        let meta: SurfaceMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        if let Some(pca) = meta.pca() {
            ensure!(pca.n_components() == spec.d, "PCA model has {} components, generator emits {}", pca.n_components(), spec.d);
            let mut full = Array3::zeros((n, t, pca.dim()));
            for (i, path) in bundle.paths().axis_iter(Axis(0)).enumerate() {
                full.slice_mut(s![i, .., ..]).assign(&surfaces::pca_invert(&pca, &path.to_owned())?);
            }
            bundle = PathBundle::new(full, bundle.seed, bundle.model_id.clone())?;
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("bundle.bin");
    data_io::save_bundle(&path, &bundle)?;
    println!("wrote {} paths x {} steps x {} channels to {}", n, t, bundle.channels(), path.display());
    Ok(path)
}

fn mean_lags(bundle: &PathBundle, channel: usize, kind: CorrKind, delta: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; delta];
    for i in 0..bundle.n_paths() {
        let lags = metrics::lag_correlations(&bundle.series(i, channel).to_vec(), kind, delta)?;
        for (a, v) in acc.iter_mut().zip(lags) {
            *a += v / bundle.n_paths() as f64;
        }
    }
    Ok(acc)
}

fn pooled(bundle: &PathBundle, channel: usize) -> Vec<f64> {
    bundle.paths().slice(s![.., .., channel]).iter().copied().collect()
}

pub fn evaluate(data: &Path, bundle_path: &Path, mode: Option<Mode>, delta: Option<usize>, out: &Path) -> Result<ScoreReport> {
    require(data)?;
    require(bundle_path)?;
    let bundle = data_io::load_bundle(bundle_path)?;
    let mode = mode.unwrap_or(if bundle.channels() == 1 { Mode::Index } else { Mode::Surface });
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = match mode {
        Mode::Index => {
            let delta = delta.unwrap_or(250);
            let r = data_io::to_log_returns(&data_io::read_price_csv(data)?)?;
            let report = metrics::index_scores(&r, &bundle, delta)?;
            plots::density_overlay(&out.join("density.svg"), "daily log-returns", &r, &pooled(&bundle, 0))?;
            let mut panels = Vec::new();
            for (name, kind) in [("ACF", CorrKind::Acf), ("ACF(abs)", CorrKind::AcfAbs), ("ACF(sq)", CorrKind::AcfSq), ("Lev", CorrKind::Lev)] {
                panels.push((name, metrics::lag_correlations(&r, kind, delta)?, mean_lags(&bundle, 0, kind, delta)?));
            }
            plots::acf_overlay(&out.join("acf.svg"), &panels)?;
            report
        }
        Mode::Surface => {
            let delta = delta.unwrap_or(64);
            let grid = data_io::load_surface_csv(data)?;
            let report = metrics::surface_scores(&grid, &bundle, delta)?;
            let k = grid.strikes().iter().position(|&k| (k - 1.0).abs() < 1e-9).unwrap_or(grid.n_strikes() / 2);
            let j = grid.flat_index(k + 1, 1);
            let real = grid.data().column(j).to_vec();
            plots::density_overlay(&out.join("density.svg"), "log-volatility, shortest maturity, central strike", &real, &pooled(&bundle, j))?;
            let mut panels = Vec::new();
            for (name, kind) in [("ACF", CorrKind::Acf), ("ACF(r)", CorrKind::AcfR)] {
                panels.push((name, metrics::lag_correlations(&real, kind, delta)?, mean_lags(&bundle, j, kind, delta)?));
            }
            plots::acf_overlay(&out.join("acf.svg"), &panels)?;
            let flat = bundle
                .paths()
                .to_shape((bundle.n_paths() * bundle.len(), bundle.channels()))?
                .to_owned();
            let diff = metrics::correlation_matrix(grid.data())? - metrics::correlation_matrix(&flat)?;
            plots::heatmap(&out.join("crosscorr.svg"), "correlation difference (real - generated)", &diff)?;
            report
        }
    };
    write(&out.join("scores.json"), report.to_json()?)?;
    println!("{}", report.to_json()?);
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArbitrageSummary {
    pub surfaces: usize,
    pub violating: usize,
    pub rate: f64,
    pub rate_after: f64,
}

pub fn repair(data: &Path, bundle_path: &Path, out: &Path) -> Result<ArbitrageSummary> {
    require(data)?;
    require(bundle_path)?;
    let grid: SurfaceGrid = data_io::load_surface_csv(data)?;
    let bundle = data_io::load_bundle(bundle_path)?;
    let pool = thread_pool()?;
    let parts: Vec<_> = pool.install(|| {
        (0..bundle.n_paths())
            .into_par_iter()
            .map(|i| {
                let one = PathBundle::new(bundle.paths().slice(s![i..i + 1, .., ..]).to_owned(), bundle.seed, bundle.model_id.clone())?;
                surfaces::repair_pipeline(&one, &grid).with_context(|| format!("path {i}"))
            })
            .collect::<Result<_>>()
    })?;
    let mut paths = Array3::zeros(bundle.paths().dim());
    let mut violating = 0;
    for (i, p) in parts.iter().enumerate() {
        paths.slice_mut(s![i, .., ..]).assign(&p.bundle.paths().slice(s![0, .., ..]));
        violating += p.violations.iter().filter(|&&v| v).count();
    }
    let repaired = PathBundle::new(paths, bundle.seed, bundle.model_id.clone())?;
    let surfaces = bundle.n_paths() * bundle.len();
    let summary = ArbitrageSummary {
        surfaces,
        violating,
        rate: violating as f64 / surfaces as f64,
        rate_after: metrics::arbitrage_rate(&repaired, &grid)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    data_io::save_bundle(out.join("repaired.bin"), &repaired)?;
    write(&out.join("arbitrage.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(summary)
}

/// Collects whatever run artifacts exist in `dir` into `report.md`.
pub fn report(dir: &Path) -> Result<String> {
    require(dir)?;
    let mut md = String::from("# Run report\n\n");
    let mut found = false;
    let run = dir.join("run.toml");
    if run.exists() {
        found = true;
        let cfg: toml::Table = toml::from_str(&std::fs::read_to_string(&run)?)?;
        md.push_str("## Configuration\n\n");
        for key in ["mode", "family", "preset", "feature", "seed", "data"] {
            if let Some(v) = cfg.get(key) {
                writeln!(md, "- {key}: {v}")?;
            }
        }
        md.push('\n');
    }
    let hist = dir.join("history.ndjson");
    if hist.exists() {
        found = true;
        let records: Vec<HistoryRecord> = std::fs::read_to_string(&hist)?
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .context("parsing history")?;
        md.push_str("## Training\n\n");
        writeln!(md, "- iterations: {}", records.len())?;
        if let Some(last) = records.last() {
            writeln!(md, "- final loss_G: {:.6}", last.loss_g)?;
            writeln!(md, "- final loss_D: {:.6}", last.loss_d)?;
            writeln!(md, "- final gradient penalty: {:.6}", last.grad_penalty_mean)?;
        }
        md.push('\n');
    }
    let scores = dir.join("scores.json");
    if scores.exists() {
        found = true;
        let r: ScoreReport = serde_json::from_str(&std::fs::read_to_string(&scores)?)?;
        writeln!(md, "## Scores (delta = {})\n\n| metric | value |\n|---|---|", r.delta)?;
        for (k, v) in &r.scores {
            writeln!(md, "| {k} | {v:.4e} |")?;
        }
        md.push('\n');
    }
    let arb = dir.join("arbitrage.json");
    if arb.exists() {
        found = true;
        let a: ArbitrageSummary = serde_json::from_str(&std::fs::read_to_string(&arb)?)?;
        md.push_str("## Arbitrage\n\n");
        writeln!(md, "- surfaces checked: {}", a.surfaces)?;
        writeln!(md, "- violating before repair: {} (rate {:.4})", a.violating, a.rate)?;
        writeln!(md, "- rate after repair: {:.4}", a.rate_after)?;
    }
    if !found {
        bail!("no run artifacts in {}", dir.display());
    }
    write(&dir.join("report.md"), &md)?;
    print!("{md}");
    Ok(md)
}
