//! Implied-volatility surfaces on a strike/maturity grid: flattened indexing,
//! Black call prices, static no-arbitrage checks, LP repair and PCA.

pub mod lp;
mod pca;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Error, Result};
use crate::PathBundle;

pub use pca::{pca_fit, pca_invert, pca_project, PcaModel, DEFAULT_PCA_COMPONENTS};

/// Constraint tolerance used by the checker.
pub const ARBITRAGE_TOL: f64 = 1e-8;
/// Slack demanded by [`repair_pipeline`] so repaired surfaces stay clean after
/// being stored in single precision.
pub const PIPELINE_MARGIN: f64 = 1e-7;
pub const DEFAULT_UPPER_STRIKE: f64 = 10.0;

/// Strike/maturity grid with a `T x d` log-volatility matrix.
///
/// Column `(m - 1) * N_K + k` (1-based) holds strike `k` at maturity `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    strikes: Vec<f64>,
    maturities: Vec<f64>,
    #[serde(skip)]
    data: Array2<f64>,
    #[serde(default)]
    dates: Vec<String>,
    lower_strike: f64,
    upper_strike: f64,
}

impl SurfaceGrid {
    pub fn new(strikes: Vec<f64>, maturities: Vec<f64>, data: Array2<f64>) -> Result<Self> {
        ensure!(!strikes.is_empty() && !maturities.is_empty(), Config, "grid needs at least one strike and maturity");
        ensure!(strikes.iter().all(|&k| k > 0.0 && k.is_finite()), Config, "strikes must be positive");
        ensure!(strikes.windows(2).all(|w| w[1] > w[0]), Config, "strikes must be strictly increasing");
        if strikes.len() > 2 {
            let dk = strikes[1] - strikes[0];
            ensure!(
                strikes.windows(2).all(|w| ((w[1] - w[0]) - dk).abs() <= 1e-9 * (1.0 + dk)),
                Config,
                "strikes must be equally spaced"
            );
        }
        ensure!(maturities.iter().all(|&m| m > 0.0 && m.is_finite()), Config, "maturities must be positive");
        ensure!(maturities.windows(2).all(|w| w[1] > w[0]), Config, "maturities must be strictly increasing");
        let d = strikes.len() * maturities.len();
        ensure!(data.ncols() == d, Shape, "data has {} columns, grid needs {d}", data.ncols());
        ensure!(data.iter().all(|v| v.is_finite()), NonFinite, "log-vols must be finite");
        let upper = DEFAULT_UPPER_STRIKE.max(2.0 * strikes[strikes.len() - 1]);
        Ok(Self { strikes, maturities, data, dates: Vec::new(), lower_strike: 0.0, upper_strike: upper })
    }

    /// Grid geometry without observations.
    pub fn geometry(strikes: Vec<f64>, maturities: Vec<f64>) -> Result<Self> {
        let d = strikes.len() * maturities.len();
        Self::new(strikes, maturities, Array2::zeros((0, d)))
    }

    pub fn with_dates(mut self, dates: Vec<String>) -> Result<Self> {
        ensure!(dates.len() == self.data.nrows(), Shape, "{} dates for {} rows", dates.len(), self.data.nrows());
        self.dates = dates;
        Ok(self)
    }

    /// Overrides the boundary strikes `K_0` and `K_{N_K+1}` whose prices are fixed at `1 - K_0` and 0.
    pub fn with_boundary_strikes(mut self, lower: f64, upper: f64) -> Result<Self> {
        ensure!(
            lower >= 0.0 && lower < self.strikes[0] && upper > self.strikes[self.strikes.len() - 1],
            Config,
            "boundary strikes must bracket the grid"
        );
        self.lower_strike = lower;
        self.upper_strike = upper;
        Ok(self)
    }

    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        let mut g = Self::new(self.strikes.clone(), self.maturities.clone(), data)?;
        g.lower_strike = self.lower_strike;
        g.upper_strike = self.upper_strike;
        Ok(g)
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn n_maturities(&self) -> usize {
        self.maturities.len()
    }

    pub fn channels(&self) -> usize {
        self.strikes.len() * self.maturities.len()
    }

    pub fn boundary_strikes(&self) -> (f64, f64) {
        (self.lower_strike, self.upper_strike)
    }

    /// 1-based flattened index of strike `k` and maturity `m` (both 1-based).
    pub fn flat_index(&self, k: usize, m: usize) -> usize {
        (m - 1) * self.n_strikes() + k
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn grid_position(&self, j: usize) -> (usize, usize) {
        let n_k = self.n_strikes();
        ((j - 1) % n_k + 1, (j - 1) / n_k + 1)
    }
}

/// Call prices `C[k, m]` (0-based storage) with the boundary strikes.
#[derive(Clone, Debug, PartialEq)]
pub struct CallGrid {
    pub prices: Array2<f64>,
    pub strikes: Vec<f64>,
    pub lower_strike: f64,
    pub upper_strike: f64,
}

impl CallGrid {
    pub fn new(prices: Array2<f64>, strikes: Vec<f64>, lower_strike: f64, upper_strike: f64) -> Result<Self> {
        ensure!(prices.nrows() == strikes.len(), Shape, "{} price rows for {} strikes", prices.nrows(), strikes.len());
        ensure!(prices.ncols() >= 1, Shape, "need at least one maturity");
        ensure!(prices.iter().all(|v| v.is_finite()), NonFinite, "call prices must be finite");
        ensure!(
            lower_strike < strikes[0] && upper_strike > strikes[strikes.len() - 1],
            Config,
            "boundary strikes must bracket the grid"
        );
        Ok(Self { prices, strikes, lower_strike, upper_strike })
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn n_maturities(&self) -> usize {
        self.prices.ncols()
    }

    /// Price at strike index `i ∈ 0..=N_K+1` including the two boundaries.
    fn extended(&self, i: usize, j: usize) -> f64 {
        if i == 0 {
            1.0 - self.lower_strike
        } else if i == self.n_strikes() + 1 {
            0.0
        } else {
            self.prices[[i - 1, j]]
        }
    }

    fn strike(&self, i: usize) -> f64 {
        if i == 0 {
            self.lower_strike
        } else if i == self.n_strikes() + 1 {
            self.upper_strike
        } else {
            self.strikes[i - 1]
        }
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Undiscounted Black call price with unit forward.
pub fn black_call(strike: f64, maturity: f64, sigma: f64) -> f64 {
    let intrinsic = (1.0 - strike).max(0.0);
    let s = sigma * maturity.sqrt();
    if !(s > 0.0) {
        return intrinsic;
    }
    if strike <= 0.0 {
        return 1.0 - strike;
    }
    let n = std_normal();
    let d1 = (-strike.ln() + 0.5 * s * s) / s;
    let d2 = d1 - s;
    let c = n.cdf(d1) - strike * n.cdf(d2);
    c.max(intrinsic)
}

/// Prices every grid point of one log-vol surface row.
pub fn vol_to_calls(row: ArrayView1<'_, f64>, grid: &SurfaceGrid) -> Result<CallGrid> {
    ensure!(row.len() == grid.channels(), Shape, "surface has {} values, grid needs {}", row.len(), grid.channels());
    ensure!(row.iter().all(|v| v.is_finite()), NonFinite, "log-vols must be finite");
    let n_k = grid.n_strikes();
    let prices = Array2::from_shape_fn((n_k, grid.n_maturities()), |(k, m)| {
        black_call(grid.strikes[k], grid.maturities[m], row[m * n_k + k].exp())
    });
    CallGrid::new(prices, grid.strikes.clone(), grid.lower_strike, grid.upper_strike)
}

/// Log implied volatility of one call price by bisection in `ln σ`.
pub fn implied_log_vol(price: f64, strike: f64, maturity: f64) -> Result<f64> {
    let intrinsic = (1.0 - strike).max(0.0);
    ensure!(
        price > intrinsic && price < 1.0,
        PriceBounds,
        "price {price} outside the open interval ({intrinsic}, 1) at strike {strike}, maturity {maturity}"
    );
    let f = |s: f64| black_call(strike, maturity, s.exp()) - price;
    let mut lo = -40.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi += 2.0;
        ensure!(hi < 40.0, PriceBounds, "no volatility reproduces price {price} at strike {strike}");
    }
    while f(lo) > 0.0 {
        lo -= 10.0;
        ensure!(lo > -400.0, PriceBounds, "price {price} too close to intrinsic at strike {strike}");
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if f(hi).abs() < f(lo).abs() { hi } else { lo })
}

/// Inverts [`vol_to_calls`]: one log-vol per flattened grid index.
pub fn calls_to_vols(c: &CallGrid, grid: &SurfaceGrid) -> Result<Array1<f64>> {
    ensure!(
        c.n_strikes() == grid.n_strikes() && c.n_maturities() == grid.n_maturities(),
        Shape,
        "call grid does not match surface grid"
    );
    let n_k = grid.n_strikes();
    let mut out = Array1::zeros(grid.channels());
    for m in 0..grid.n_maturities() {
        for k in 0..n_k {
            out[m * n_k + k] = implied_log_vol(c.prices[[k, m]], grid.strikes[k], grid.maturities[m]).map_err(
                |e| Error::PriceBounds(format!("grid point (strike {}, maturity {}): {e}", k + 1, m + 1)),
            )?;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `C_{1,j} ≥ 1 - K_1`
    LowerBound,
    /// `C_{N_K,j} ≥ 0`
    NonNegative,
    /// `C_{i,j} ≥ C_{i,j-1}`
    Calendar,
    /// Slopes nondecreasing in strike, boundary prices included.
    Convexity,
}

/// A violated constraint at 1-based strike and maturity indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    pub strike: usize,
    pub maturity: usize,
    pub amount: f64,
}

/// `Σ coef · C + constant ≥ 0`, with `C` flattened strike-major as `k * N_M + m`.
struct Row {
    kind: ConstraintKind,
    strike: usize,
    maturity: usize,
    terms: Vec<(usize, f64)>,
    constant: f64,
}

fn constraint_rows(c: &CallGrid) -> Vec<Row> {
    let (n_k, n_m) = (c.n_strikes(), c.n_maturities());
    let var = |i: usize, j: usize| (i - 1) * n_m + j;
    let mut rows = Vec::new();
    for j in 0..n_m {
        rows.push(Row {
            kind: ConstraintKind::LowerBound,
            strike: 1,
            maturity: j + 1,
            terms: vec![(var(1, j), 1.0)],
            constant: -(1.0 - c.strikes[0]),
        });
        rows.push(Row {
            kind: ConstraintKind::NonNegative,
            strike: n_k,
            maturity: j + 1,
            terms: vec![(var(n_k, j), 1.0)],
            constant: 0.0,
        });
    }
    for i in 1..=n_k {
        for j in 1..n_m {
            rows.push(Row {
                kind: ConstraintKind::Calendar,
                strike: i,
                maturity: j + 1,
                terms: vec![(var(i, j), 1.0), (var(i, j - 1), -1.0)],
                constant: 0.0,
            });
        }
    }
    for i in 1..=n_k {
        let (kl, km, kr) = (c.strike(i - 1), c.strike(i), c.strike(i + 1));
        let w = (kr - km) / (kr - kl);
        for j in 0..n_m {
            let mut terms = vec![(var(i, j), -1.0)];
            let mut constant = 0.0;
            if i == 1 {
                constant += w * c.extended(0, j);
            } else {
                terms.push((var(i - 1, j), w));
            }
            if i == n_k {
                constant += (1.0 - w) * c.extended(n_k + 1, j);
            } else {
                terms.push((var(i + 1, j), 1.0 - w));
            }
            rows.push(Row { kind: ConstraintKind::Convexity, strike: i, maturity: j + 1, terms, constant });
        }
    }
    rows
}

fn flat_prices(c: &CallGrid) -> Vec<f64> {
    c.prices.iter().copied().collect()
}

fn row_value(row: &Row, x: &[f64]) -> f64 {
    row.terms.iter().map(|&(v, a)| a * x[v]).sum::<f64>() + row.constant
}

fn violations_with(c: &CallGrid, tol: f64) -> Vec<Violation> {
    let x = flat_prices(c);
    constraint_rows(c)
        .into_iter()
        .filter_map(|r| {
            let v = row_value(&r, &x);
            (v < -tol).then_some(Violation { kind: r.kind, strike: r.strike, maturity: r.maturity, amount: -v })
        })
        .collect()
}

/// All static-arbitrage constraints violated by more than [`ARBITRAGE_TOL`].
///
/// Convexity is measured as the butterfly `w C_{i-1} + (1-w) C_{i+1} - C_i`
/// in price units.
pub fn check_no_arbitrage(c: &CallGrid) -> Vec<Violation> {
    violations_with(c, ARBITRAGE_TOL)
}

/// Outcome of an L1-closest repair.
#[derive(Clone, Debug, PartialEq)]
pub struct Repair {
    pub calls: CallGrid,
    /// `Σ |Ĉ - C|`.
    pub objective: f64,
}

/// Closest arbitrage-free surface in the L1 sense, with every constraint
/// holding with at least `margin` to spare.
pub fn repair_arbitrage_with_margin(c_hat: &CallGrid, margin: f64) -> Result<Repair> {
    ensure!(margin >= 0.0, Config, "margin must be nonnegative");
    if violations_with(c_hat, -margin).is_empty() {
        return Ok(Repair { calls: c_hat.clone(), objective: 0.0 });
    }
    let rows = constraint_rows(c_hat);
    let x_hat = flat_prices(c_hat);
    let n = x_hat.len();
    let r = rows.len();
    // variables: p (n), q (n), surplus (r); C = Ĉ + p - q
    let mut a = Array2::zeros((r, 2 * n + r));
    let mut b = Array1::zeros(r);
    for (ri, row) in rows.iter().enumerate() {
        for &(v, coef) in &row.terms {
            a[[ri, v]] += coef;
            a[[ri, n + v]] -= coef;
        }
        a[[ri, 2 * n + ri]] = -1.0;
        b[ri] = margin - row_value(row, &x_hat);
    }
    let cost = Array1::from_iter((0..2 * n + r).map(|j| if j < 2 * n { 1.0 } else { 0.0 }));
    let sol = lp::solve_standard(&cost, &a, &b)?;
    let cap = 1.0 - c_hat.lower_strike;
    let mut prices = c_hat.prices.clone();
    for (idx, p) in prices.iter_mut().enumerate() {
        *p = (x_hat[idx] + sol.x[idx] - sol.x[n + idx]).clamp(0.0, cap);
    }
    let objective = prices.iter().zip(&x_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(Repair { calls: CallGrid { prices, ..c_hat.clone() }, objective })
}

pub fn repair_arbitrage(c_hat: &CallGrid) -> Result<CallGrid> {
    Ok(repair_arbitrage_with_margin(c_hat, 0.0)?.calls)
}

/// Result of [`repair_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub bundle: PathBundle,
    /// `N x T` flags, true where the generated surface violated a constraint.
    pub violations: Array2<bool>,
    pub rate: f64,
}

/// Checks every generated surface and replaces violating ones by their
/// repaired counterparts; clean surfaces pass through untouched.
pub fn repair_pipeline(bundle: &PathBundle, grid: &SurfaceGrid) -> Result<PipelineOutcome> {
    ensure!(
        bundle.channels() == grid.channels(),
        Shape,
        "bundle has {} channels, grid needs {}",
        bundle.channels(),
        grid.channels()
    );
    let mut out = bundle.paths().clone();
    let mut flags = Array2::from_elem((bundle.n_paths(), bundle.len()), false);
    for (i, mut path) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (t, mut row) in path.axis_iter_mut(Axis(0)).enumerate() {
            let calls = vol_to_calls(row.view(), grid)?;
            if check_no_arbitrage(&calls).is_empty() {
                continue;
            }
            flags[[i, t]] = true;
            let fixed = repair_arbitrage_with_margin(&calls, PIPELINE_MARGIN)
                .and_then(|r| calls_to_vols(&r.calls, grid))
                .map_err(|e| Error::PriceBounds(format!("path {}, time {}: {e}", i + 1, t + 1)))?;
            row.assign(&fixed);
        }
    }
    let rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    Ok(PipelineOutcome { bundle: PathBundle::new(out, bundle.seed, bundle.model_id.clone())?, violations: flags, rate })
}
