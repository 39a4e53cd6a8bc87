//! Python bindings: generator training and sampling, stylized-fact scores,
//! dataset statistics, PCA and arbitrage repair of call-price grids.

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tsgan::networks::{build_discriminator, build_generator, DiscriminatorSpec, Family, GeneratorSpec, NetworkInstance};
use tsgan::training::{self, TrainConfig};
use tsgan::{data_io, metrics, surfaces, PathBundle, TimeSeriesMatrix};

fn py_err(e: tsgan::Error) -> PyErr {
    match e {
        tsgan::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, c), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn family(name: &str) -> PyResult<Family> {
    match name.to_ascii_lowercase().as_str() {
        "ttgan" => Ok(Family::Ttgan),
        "tagan" => Ok(Family::Tagan),
        _ => Err(PyValueError::new_err(format!("unknown family {name:?}; use 'ttgan' or 'tagan'"))),
    }
}

fn specs(fam: Family, l: usize, f: usize, d: usize, desk: bool) -> (GeneratorSpec, DiscriminatorSpec) {
    match (fam, desk) {
        (Family::Ttgan, true) => (training::desk_generator(l, f, d), training::desk_discriminator(l, d)),
        (Family::Ttgan, false) => (GeneratorSpec::ttgan(l, f, d), DiscriminatorSpec::ttgan(l, d)),
        (Family::Tagan, _) => (GeneratorSpec::tagan(l, f, d), DiscriminatorSpec::tagan(l, d)),
    }
}

/// A generator network. Sampling draws standard normal noise and stitches
/// windows so that arbitrarily long paths stay consistent.
#[pyclass(module = "tsgan")]
struct Generator {
    inner: NetworkInstance,
}

#[pymethods]
impl Generator {
    #[new]
    #[pyo3(signature = (family = "ttgan", l = 64, f = 63, d = 1, seed = 0, desk = true))]
    fn new(family: &str, l: usize, f: usize, d: usize, seed: u64, desk: bool) -> PyResult<Self> {
        let (g, _) = specs(self::family(family)?, l, f, d, desk);
        let mut inner = build_generator(&g, seed).map_err(py_err)?;
        inner.set_mode(tsgan::layers::NormMode::Eval);
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = NetworkInstance::load(path).map_err(py_err)?;
        if inner.generator_spec().is_none() {
            return Err(PyValueError::new_err("checkpoint does not hold a generator"));
        }
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn window(&self) -> (usize, usize) {
        let s = self.inner.generator_spec().expect("generator");
        (s.l, s.f)
    }

    /// `n` paths of `length` steps as nested lists `[path][time][channel]`.
    #[pyo3(signature = (n, length, seed = 0))]
    fn sample(&self, py: Python<'_>, n: usize, length: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let b = py.detach(|| training::sample_paths(&self.inner, n, length, seed)).map_err(py_err)?;
        Ok(b.paths().outer_iter().map(|p| to_rows(&p.to_owned())).collect())
    }

    /// Output for one explicit noise matrix of `l + f - 1` rows.
    fn generate(&self, noise: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = TimeSeriesMatrix::new(matrix(noise)?).map_err(py_err)?;
        let y = tsgan::networks::generate(&self.inner, &z).map_err(py_err)?;
        Ok(to_rows(y.values()))
    }
}

/// Trains a generator on a return series (one channel) and returns it with
/// the per-iteration losses.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (returns, iterations = 2000, seed = 0, family = "ttgan", l = 64, f = 63, batch_size = 16))]
fn train(
    py: Python<'_>,
    returns: Vec<f64>,
    iterations: usize,
    seed: u64,
    family: &str,
    l: usize,
    f: usize,
    batch_size: usize,
) -> PyResult<(Generator, Vec<(f64, f64)>)> {
    let (gs, ds) = specs(self::family(family)?, l, f, 1, true);
    let cfg = TrainConfig { iterations, seed, batch_size, ..TrainConfig::desk() };
    let run = || -> tsgan::Result<_> {
        let data = training::make_windows(&TimeSeriesMatrix::from_column(&returns)?, l)?;
        let mut g = build_generator(&gs, seed)?;
        let mut d = build_discriminator(&ds, seed.wrapping_add(1))?;
        let h = training::train(&mut g, &mut d, &data, &cfg)?;
        Ok((g, h.records.iter().map(|r| (r.loss_g, r.loss_d)).collect()))
    };
    let (g, losses) = py.detach(run).map_err(py_err)?;
    Ok((Generator { inner: g }, losses))
}

fn bundle_of(paths: Vec<Vec<f64>>) -> PyResult<PathBundle> {
    let m = matrix(paths)?;
    let (n, t) = m.dim();
    let arr = Array3::from_shape_vec((n, t, 1), m.into_iter().collect()).expect("sized");
    PathBundle::new(arr, 0, "python").map_err(py_err)
}

/// Index score table for one-channel generated paths against real returns.
#[pyfunction]
#[pyo3(signature = (real, paths, delta = 250))]
fn index_scores<'py>(py: Python<'py>, real: Vec<f64>, paths: Vec<Vec<f64>>, delta: usize) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics::index_scores(&real, &bundle_of(paths)?, delta).map_err(py_err)?;
    let out = PyDict::new(py);
    for (k, v) in &report.scores {
        out.set_item(k, v)?;
    }
    Ok(out)
}

#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::wasserstein1(&a, &b).map_err(py_err)
}

#[pyfunction]
fn log_returns(prices: Vec<f64>) -> PyResult<Vec<f64>> {
    data_io::log_returns(&prices).map_err(py_err)
}

/// Length, mean, standard deviation, skewness and (non-excess) kurtosis.
#[pyfunction]
fn dataset_stats<'py>(py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = data_io::dataset_stats(&x).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("t_x", s.t_x)?;
    out.set_item("mean", s.mean)?;
    out.set_item("std", s.std)?;
    out.set_item("skewness", s.skewness)?;
    out.set_item("kurtosis", s.kurtosis)?;
    Ok(out)
}

type PcaParts = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Returns `(v, singular_values, components)` of the truncated SVD.
#[pyfunction]
#[pyo3(signature = (data, k = surfaces::DEFAULT_PCA_COMPONENTS))]
fn pca_fit(data: Vec<Vec<f64>>, k: usize) -> PyResult<PcaParts> {
    let (m, comps) = surfaces::pca_fit(&matrix(data)?, k).map_err(py_err)?;
    Ok((to_rows(&m.v), m.singular_values.to_vec(), to_rows(&comps)))
}

fn call_grid(prices: Vec<Vec<f64>>, strikes: Vec<f64>) -> PyResult<surfaces::CallGrid> {
    let upper = strikes.last().map_or(surfaces::DEFAULT_UPPER_STRIKE, |k| surfaces::DEFAULT_UPPER_STRIKE.max(2.0 * k));
    surfaces::CallGrid::new(matrix(prices)?, strikes, 0.0, upper).map_err(py_err)
}

/// Number of violated no-arbitrage constraints for call prices laid out
/// `[strike][maturity]`.
#[pyfunction]
fn arbitrage_violations(prices: Vec<Vec<f64>>, strikes: Vec<f64>) -> PyResult<usize> {
    Ok(surfaces::check_no_arbitrage(&call_grid(prices, strikes)?).len())
}

/// Closest arbitrage-free call prices in the L1 sense.
#[pyfunction]
fn repair_calls(prices: Vec<Vec<f64>>, strikes: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let fixed = surfaces::repair_arbitrage(&call_grid(prices, strikes)?).map_err(py_err)?;
    Ok(to_rows(&fixed.prices))
}

#[pyfunction]
fn black_call(strike: f64, maturity: f64, sigma: f64) -> f64 {
    surfaces::black_call(strike, maturity, sigma)
}

#[pymodule]
#[pyo3(name = "tsgan")]
fn tsgan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(index_scores, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(log_returns, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(pca_fit, m)?)?;
    m.add_function(wrap_pyfunction!(arbitrage_violations, m)?)?;
    m.add_function(wrap_pyfunction!(repair_calls, m)?)?;
    m.add_function(wrap_pyfunction!(black_call, m)?)?;
    Ok(())
}
