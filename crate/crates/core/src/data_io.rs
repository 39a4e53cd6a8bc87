//! Price and surface CSV ingestion, return transforms, dataset statistics
//! and the binary path-bundle format.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics;
use crate::surfaces::SurfaceGrid;
use crate::PathBundle;

/// Dated closing prices.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    prices: Vec<f64>,
}

impl PriceSeries {
    pub fn new(dates: Vec<NaiveDate>, prices: Vec<f64>) -> Result<Self> {
        ensure!(dates.len() == prices.len(), Shape, "{} dates for {} prices", dates.len(), prices.len());
        ensure!(dates.windows(2).all(|w| w[1] > w[0]), Parse, "dates must be strictly increasing");
        if let Some(i) = prices.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Parse(format!("price {} on row {} is not positive", prices[i], i + 1)));
        }
        Ok(Self { dates, prices })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Rows with `from <= date <= to`.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.dates[i] >= from && self.dates[i] <= to).collect();
        Self { dates: keep.iter().map(|&i| self.dates[i]).collect(), prices: keep.iter().map(|&i| self.prices[i]).collect() }
    }
}

fn parse_date(s: &str, row: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Parse(format!("row {row}: bad date {s:?}: {e}")))
}

fn parse_cell(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse(format!("row {row}, column {col}: cannot parse {s:?}")))?;
    ensure!(v.is_finite(), Parse, "row {row}, column {col}: missing or non-finite value");
    Ok(v)
}

/// Reads a `date,close` file. Dates are ISO `YYYY-MM-DD`.
pub fn read_price_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    read_price_csv_from(std::fs::File::open(path)?)
}

pub fn read_price_csv_from(reader: impl Read) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let date_col = find("date").ok_or_else(|| Error::Parse("missing `date` column".into()))?;
    let close_col = find("close").ok_or_else(|| Error::Parse("missing `close` column".into()))?;
    let (mut dates, mut prices) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let row = i + 2;
        dates.push(parse_date(rec.get(date_col).unwrap_or(""), row)?);
        prices.push(parse_cell(rec.get(close_col).unwrap_or(""), row, "close")?);
    }
    PriceSeries::new(dates, prices)
}

/// `x_t = ln(p_t / p_{t-1})`.
pub fn to_log_returns(p: &PriceSeries) -> Result<Vec<f64>> {
    log_returns(p.prices())
}

pub fn log_returns(prices: &[f64]) -> Result<Vec<f64>> {
    ensure!(prices.len() >= 2, TooShort, "need at least two prices");
    ensure!(prices.iter().all(|&p| p > 0.0), Parse, "prices must be positive");
    Ok(prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub t_x: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

/// Length, mean, population standard deviation, skewness and non-excess kurtosis.
pub fn dataset_stats(x: &[f64]) -> Result<DatasetStats> {
    let skewness = metrics::skewness(x)?;
    let kurtosis = metrics::kurtosis(x)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DatasetStats { t_x: x.len(), mean, std, skewness, kurtosis })
}

/// Parses a maturity label such as `1m`, `6M`, `2w`, `30d` or `1y` into years.
pub fn parse_maturity(label: &str) -> Result<f64> {
    let s = label.trim().to_ascii_lowercase();
    let s = s.strip_suffix("-month").or_else(|| s.strip_suffix("month")).map(|v| format!("{v}m")).unwrap_or(s);
    let (num, unit) = s.split_at(s.len().saturating_sub(1));
    let n: f64 = num.trim().parse().map_err(|_| Error::Parse(format!("bad maturity label {label:?}")))?;
    let years = match unit {
        "d" => n / 365.0,
        "w" => n / 52.0,
        "m" => n / 12.0,
        "y" => n,
        _ => return Err(Error::Parse(format!("bad maturity unit in {label:?}"))),
    };
    ensure!(years > 0.0, Parse, "maturity {label:?} must be positive");
    Ok(years)
}

/// Parses a relative strike such as `85%` or `0.85`.
pub fn parse_strike(label: &str) -> Result<f64> {
    let s = label.trim();
    let v = match s.strip_suffix('%') {
        Some(p) => p.trim().parse::<f64>().map(|v| v / 100.0),
        None => s.parse::<f64>(),
    }
    .map_err(|_| Error::Parse(format!("bad strike label {label:?}")))?;
    ensure!(v > 0.0, Parse, "strike {label:?} must be positive");
    Ok(v)
}

fn unique_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    v
}

/// Reads a surface CSV whose header is `date,<maturity>-<strike>,...` with
/// implied volatilities in the cells; stores their logarithms. Column order
/// is taken from the header.
pub fn load_surface_csv(path: impl AsRef<Path>) -> Result<SurfaceGrid> {
    load_surface_csv_from(std::fs::File::open(path)?)
}

pub fn load_surface_csv_from(reader: impl Read) -> Result<SurfaceGrid> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    ensure!(headers.len() >= 2, Parse, "surface file needs a date column and at least one surface column");
    ensure!(headers[0].eq_ignore_ascii_case("date"), Parse, "first column must be `date`, found {:?}", &headers[0]);
    let mut points = Vec::new();
    for h in headers.iter().skip(1) {
        let (m, k) = h
            .rsplit_once('-')
            .ok_or_else(|| Error::Parse(format!("column {h:?} is not `maturity-strike`")))?;
        points.push((parse_maturity(m)?, parse_strike(k)?));
    }
    let maturities = unique_sorted(points.iter().map(|p| p.0).collect());
    let strikes = unique_sorted(points.iter().map(|p| p.1).collect());
    let d = maturities.len() * strikes.len();
    ensure!(points.len() == d, Parse, "header has {} surface columns, grid {}x{} needs {d}", points.len(), maturities.len(), strikes.len());
    let pos = |x: f64, set: &[f64]| set.iter().position(|&s| (s - x).abs() < 1e-12).expect("member");
    let target: Vec<usize> = points.iter().map(|&(m, k)| pos(m, &maturities) * strikes.len() + pos(k, &strikes)).collect();
    let mut seen = vec![false; d];
    for &t in &target {
        ensure!(!seen[t], Parse, "duplicate surface column in header");
        seen[t] = true;
    }
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let row = i + 2;
        ensure!(rec.len() == headers.len(), Parse, "row {row} has {} fields, expected {}", rec.len(), headers.len());
        let date = parse_date(&rec[0], row)?;
        if let Some(prev) = dates.last() {
            ensure!(date > *prev, Parse, "row {row}: dates must be strictly increasing");
        }
        dates.push(date);
        let mut line = vec![0.0; d];
        for (c, &t) in target.iter().enumerate() {
            let v = parse_cell(&rec[c + 1], row, &headers[c + 1])?;
            ensure!(v > 0.0, Parse, "row {row}, column {}: volatility must be positive", &headers[c + 1]);
            line[t] = v.ln();
        }
        values.extend(line);
    }
    ensure!(!dates.is_empty(), Parse, "surface file has no data rows");
    let data = Array2::from_shape_vec((dates.len(), d), values).map_err(|e| Error::Shape(e.to_string()))?;
    SurfaceGrid::new(strikes, maturities, data)?.with_dates(dates.iter().map(|d| d.to_string()).collect())
}

/// Header labels in flattened order, e.g. `1m-85%`.
pub fn surface_labels(grid: &SurfaceGrid) -> Vec<String> {
    let mut out = Vec::with_capacity(grid.channels());
    for &m in grid.maturities() {
        let months = m * 12.0;
        let ml = if (months - months.round()).abs() < 1e-9 { format!("{}m", months.round()) } else { format!("{}y", m) };
        for &k in grid.strikes() {
            out.push(format!("{ml}-{}%", (k * 100.0 * 1e6).round() / 1e6));
        }
    }
    out
}

pub fn write_surface_csv(path: impl AsRef<Path>, grid: &SurfaceGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut header = vec!["date".to_string()];
    header.extend(surface_labels(grid));
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for (t, row) in grid.data().rows().into_iter().enumerate() {
        let mut rec = vec![grid.dates().get(t).cloned().unwrap_or_else(|| t.to_string())];
        rec.extend(row.iter().map(|v| v.exp().to_string()));
        w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

const BUNDLE_MAGIC: &[u8] = b"TSBUNDLE\n";
const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    version: u32,
    shape: [usize; 3],
    seed: u64,
    model_id: String,
    dtype: String,
    byte_order: String,
}

/// Writes magic, a one-line JSON header and a little-endian `f32` payload in `N, T, d` order.
pub fn bundle_to_bytes(bundle: &PathBundle) -> Result<Vec<u8>> {
    let (n, t, d) = bundle.paths().dim();
    let header = BundleHeader {
        version: BUNDLE_VERSION,
        shape: [n, t, d],
        seed: bundle.seed,
        model_id: bundle.model_id.clone(),
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    let mut out = BUNDLE_MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header)?);
    out.push(b'\n');
    out.reserve(n * t * d * 4);
    for &v in bundle.paths().iter() {
        out.extend((v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<PathBundle> {
    let rest = bytes
        .strip_prefix(BUNDLE_MAGIC)
        .ok_or_else(|| Error::Parse("not a path bundle (bad magic)".into()))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse("truncated bundle header".into()))?;
    let header: BundleHeader = serde_json::from_slice(&rest[..nl])?;
    ensure!(header.version == BUNDLE_VERSION, Parse, "unsupported bundle version {}", header.version);
    ensure!(header.dtype == "f32" && header.byte_order == "little", Parse, "unsupported payload encoding");
    let [n, t, d] = header.shape;
    let payload = &rest[nl + 1..];
    ensure!(payload.len() == n * t * d * 4, Parse, "payload has {} bytes, header implies {}", payload.len(), n * t * d * 4);
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let paths = Array3::from_shape_vec((n, t, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    PathBundle::new(paths, header.seed, header.model_id)
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &PathBundle) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bundle_to_bytes(bundle)?)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<PathBundle> {
    bundle_from_bytes(&std::fs::read(path)?)
}
