//! Stylized-fact scores comparing a real series with a bundle of generated paths.

use indexmap::IndexMap;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::surfaces::{self, SurfaceGrid};
use crate::PathBundle;

/// Horizons of the multi-day return distances.
pub const W1_HORIZONS: [usize; 5] = [1, 5, 20, 100, 200];
pub const INDEX_DELTA: usize = 250;
pub const SURFACE_DELTA: usize = 64;

/// Exact Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), Shape, "Wasserstein distance needs nonempty samples");
    ensure!(a.iter().chain(b).all(|v| v.is_finite()), NonFinite, "samples must be finite");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// All overlapping `tau`-step sums of `x`.
pub fn multiday_returns(x: &[f64], tau: usize) -> Result<Vec<f64>> {
    ensure!(tau >= 1, Config, "horizon must be positive");
    ensure!(x.len() >= tau, TooShort, "series of length {} shorter than horizon {tau}", x.len());
    let mut acc: f64 = x[..tau].iter().sum();
    let mut out = Vec::with_capacity(x.len() - tau + 1);
    out.push(acc);
    for t in tau..x.len() {
        acc += x[t] - x[t - tau];
        out.push(acc);
    }
    Ok(out)
}

fn central_moments(x: &[f64]) -> Result<(f64, f64, f64)> {
    ensure!(x.len() >= 4, TooShort, "moments need at least 4 observations, got {}", x.len());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    ensure!(m2 > 0.0, Degenerate, "zero variance");
    Ok((m2, m3, m4))
}

/// `m3 / m2^{3/2}` with population moments.
pub fn skewness(x: &[f64]) -> Result<f64> {
    let (m2, m3, _) = central_moments(x)?;
    Ok(m3 / m2.powf(1.5))
}

/// Non-excess kurtosis `m4 / m2²`; 3 for a normal distribution.
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    let (m2, _, m4) = central_moments(x)?;
    Ok(m4 / (m2 * m2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    Skew,
    Kurt,
}

impl Moment {
    pub fn of(self, x: &[f64]) -> Result<f64> {
        match self {
            Moment::Skew => skewness(x),
            Moment::Kurt => kurtosis(x),
        }
    }
}

fn channel_paths(bundle: &PathBundle, channel: usize) -> Result<Vec<Vec<f64>>> {
    ensure!(
        channel < bundle.channels(),
        Shape,
        "channel {channel} out of range for {} channels",
        bundle.channels()
    );
    Ok((0..bundle.n_paths()).map(|i| bundle.series(i, channel).to_vec()).collect())
}

fn moment_gap_paths(real: &[f64], paths: &[Vec<f64>], which: Moment) -> Result<f64> {
    let r = which.of(real)?;
    let mut sum = 0.0;
    for p in paths {
        sum += which.of(p)?;
    }
    Ok((r - sum / paths.len() as f64).abs())
}

/// `|moment(real) - mean_i moment(path_i)|` on one channel.
pub fn moment_gap(real: &[f64], bundle: &PathBundle, channel: usize, which: Moment) -> Result<f64> {
    moment_gap_paths(real, &channel_paths(bundle, channel)?, which)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrKind {
    Acf,
    AcfAbs,
    AcfSq,
    Lev,
    AcfR,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Per-lag correlations `score_τ(x)` for `τ = 1..=delta`.
pub fn lag_correlations(x: &[f64], kind: CorrKind, delta: usize) -> Result<Vec<f64>> {
    let diffs;
    let x = if kind == CorrKind::AcfR {
        diffs = x.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>();
        &diffs[..]
    } else {
        x
    };
    ensure!(x.len() > delta + 1, TooShort, "series of length {} too short for {delta} lags", x.len());
    let lead: Vec<f64> = match kind {
        CorrKind::Acf | CorrKind::AcfR | CorrKind::Lev => x.to_vec(),
        CorrKind::AcfAbs => x.iter().map(|v| v.abs()).collect(),
        CorrKind::AcfSq => x.iter().map(|v| v * v).collect(),
    };
    let lagged: Vec<f64> = match kind {
        CorrKind::Acf | CorrKind::AcfR => x.to_vec(),
        CorrKind::AcfAbs => x.iter().map(|v| v.abs()).collect(),
        CorrKind::AcfSq | CorrKind::Lev => x.iter().map(|v| v * v).collect(),
    };
    let n = x.len();
    (1..=delta)
        .map(|tau| {
            pearson(&lead[..n - tau], &lagged[tau..])
                .ok_or_else(|| Error::Degenerate(format!("constant series at lag {tau} for {kind:?}")))
        })
        .collect()
}

fn correlation_score_paths(real: &[f64], paths: &[Vec<f64>], kind: CorrKind, delta: usize) -> Result<f64> {
    let r = lag_correlations(real, kind, delta)?;
    let mut mean = vec![0.0; delta];
    for p in paths {
        for (m, v) in mean.iter_mut().zip(lag_correlations(p, kind, delta)?) {
            *m += v;
        }
    }
    let n = paths.len() as f64;
    Ok(r.iter().zip(&mean).map(|(a, m)| (a - m / n).powi(2)).sum::<f64>().sqrt())
}

/// `sqrt(Σ_τ (score_τ(real) - mean_i score_τ(path_i))²)` over `τ = 1..=delta`.
pub fn correlation_score(real: &[f64], bundle: &PathBundle, channel: usize, kind: CorrKind, delta: usize) -> Result<f64> {
    correlation_score_paths(real, &channel_paths(bundle, channel)?, kind, delta)
}

fn w1_multiday(real: &[f64], paths: &[Vec<f64>], tau: usize) -> Result<f64> {
    let r = multiday_returns(real, tau)?;
    let mut pooled = Vec::new();
    for p in paths {
        pooled.extend(multiday_returns(p, tau)?);
    }
    wasserstein1(&r, &pooled)
}

/// Named scores with a stable key order, plus the lag window and free-form metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: IndexMap<String, f64>,
    pub delta: usize,
    #[serde(default)]
    pub metadata: IndexMap<String, String>,
}

impl ScoreReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.scores.get(key).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.scores.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The index-simulation score table: multi-horizon distances, moment gaps
/// and the four correlation scores. Requires single-channel data.
pub fn index_scores(real: &[f64], bundle: &PathBundle, delta: usize) -> Result<ScoreReport> {
    ensure!(bundle.channels() == 1, Shape, "index scores need one channel, got {}", bundle.channels());
    let paths = channel_paths(bundle, 0)?;
    let mut scores = IndexMap::new();
    for tau in W1_HORIZONS {
        scores.insert(format!("W1({tau})"), w1_multiday(real, &paths, tau)?);
    }
    scores.insert("skewness".into(), moment_gap_paths(real, &paths, Moment::Skew)?);
    scores.insert("kurtosis".into(), moment_gap_paths(real, &paths, Moment::Kurt)?);
    for (key, kind) in [
        ("ACF", CorrKind::Acf),
        ("ACF(abs)", CorrKind::AcfAbs),
        ("ACF(sq)", CorrKind::AcfSq),
        ("Lev", CorrKind::Lev),
    ] {
        scores.insert(key.into(), correlation_score_paths(real, &paths, kind, delta)?);
    }
    let mut metadata = IndexMap::new();
    metadata.insert("mode".into(), "index".into());
    metadata.insert("model_id".into(), bundle.model_id.clone());
    metadata.insert("seed".into(), bundle.seed.to_string());
    Ok(ScoreReport { scores, delta, metadata })
}

/// Pearson correlation matrix of the columns of `x`.
pub fn correlation_matrix(x: &Array2<f64>) -> Result<Array2<f64>> {
    ensure!(x.nrows() >= 2, TooShort, "correlation needs at least 2 rows");
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered);
    let sd = cov.diag().mapv(f64::sqrt);
    ensure!(sd.iter().all(|&s| s > 0.0), Degenerate, "constant channel in correlation matrix");
    let mut corr = cov;
    for ((i, j), v) in corr.indexed_iter_mut() {
        *v /= sd[i] * sd[j];
    }
    Ok(corr)
}

/// Surface-simulation scores, each averaged over the `d` channels, plus the
/// cross-correlation distance and the arbitrage rate.
pub fn surface_scores(real: &SurfaceGrid, bundle: &PathBundle, delta: usize) -> Result<ScoreReport> {
    let x = real.data();
    let d = x.ncols();
    ensure!(bundle.channels() == d, Shape, "bundle has {} channels, surface has {d}", bundle.channels());
    let mut sums = [0.0; 5];
    for j in 0..d {
        let r = x.column(j).to_vec();
        let paths = channel_paths(bundle, j)?;
        sums[0] += w1_multiday(&r, &paths, 1)?;
        sums[1] += moment_gap_paths(&r, &paths, Moment::Skew)?;
        sums[2] += moment_gap_paths(&r, &paths, Moment::Kurt)?;
        sums[3] += correlation_score_paths(&r, &paths, CorrKind::Acf, delta)?;
        sums[4] += correlation_score_paths(&r, &paths, CorrKind::AcfR, delta)?;
    }
    let mut scores = IndexMap::new();
    for (key, s) in ["W1(1)", "skewness", "kurtosis", "ACF", "ACF(r)"].into_iter().zip(sums) {
        scores.insert(key.to_string(), s / d as f64);
    }
    let pooled = bundle
        .paths()
        .to_shape((bundle.n_paths() * bundle.len(), d))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    let diff = correlation_matrix(x)? - correlation_matrix(&pooled)?;
    scores.insert("cross-corr".into(), diff.iter().map(|v| v * v).sum::<f64>().sqrt());
    scores.insert("arbitrage rate".into(), arbitrage_rate(bundle, real)?);
    let mut metadata = IndexMap::new();
    metadata.insert("mode".into(), "surface".into());
    metadata.insert("model_id".into(), bundle.model_id.clone());
    metadata.insert("seed".into(), bundle.seed.to_string());
    Ok(ScoreReport { scores, delta, metadata })
}

/// Fraction of generated surfaces `(i, t)` that violate a no-arbitrage constraint.
pub fn arbitrage_rate(bundle: &PathBundle, grid: &SurfaceGrid) -> Result<f64> {
    let d = grid.channels();
    ensure!(bundle.channels() == d, Shape, "bundle has {} channels, grid has {d}", bundle.channels());
    let mut bad = 0usize;
    for path in bundle.paths().axis_iter(Axis(0)) {
        for row in path.axis_iter(Axis(0)) {
            let calls = surfaces::vol_to_calls(row, grid)?;
            if !surfaces::check_no_arbitrage(&calls).is_empty() {
                bad += 1;
            }
        }
    }
    Ok(bad as f64 / (bundle.n_paths() * bundle.len()) as f64)
}

/// Scores used for monitoring during training: the index table for one
/// channel, otherwise per-channel averages of the same quantities.
pub fn path_scores(real: &Array2<f64>, bundle: &PathBundle, delta: usize) -> Result<ScoreReport> {
    let delta = delta.min(bundle.len().saturating_sub(2)).min(real.nrows().saturating_sub(2)).max(1);
    if real.ncols() == 1 {
        return index_scores(&real.column(0).to_vec(), bundle, delta);
    }
    let d = real.ncols();
    ensure!(bundle.channels() == d, Shape, "bundle has {} channels, data has {d}", bundle.channels());
    let mut report = ScoreReport { delta, ..Default::default() };
    for j in 0..d {
        let col = real.column(j).to_vec();
        let paths = channel_paths(bundle, j)?;
        for (key, v) in [
            ("W1(1)", w1_multiday(&col, &paths, 1)?),
            ("skewness", moment_gap_paths(&col, &paths, Moment::Skew)?),
            ("kurtosis", moment_gap_paths(&col, &paths, Moment::Kurt)?),
            ("ACF", correlation_score_paths(&col, &paths, CorrKind::Acf, delta)?),
        ] {
            *report.scores.entry(key.to_string()).or_insert(0.0) += v / d as f64;
        }
    }
    report.metadata.insert("mode".into(), "channel_mean".into());
    Ok(report)
}

/// Sample moments of one channel of a bundle, averaged over paths.
pub fn mean_path_moment(bundle: &PathBundle, channel: usize, which: Moment) -> Result<f64> {
    let paths = channel_paths(bundle, channel)?;
    let mut s = 0.0;
    for p in &paths {
        s += which.of(p)?;
    }
    Ok(s / paths.len() as f64)
}
