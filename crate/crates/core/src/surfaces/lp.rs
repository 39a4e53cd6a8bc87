//! Dense two-phase simplex for `min cᵀx` subject to `A x = b`, `x ≥ 0`.
//!
//! Pivoting follows Bland's rule (lowest eligible index enters and leaves),
//! so the method terminates on degenerate problems.

use ndarray::{Array1, Array2};

use crate::error::{ensure, Error, Result};

const PIVOT_EPS: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Array1<f64>,
    pub objective: f64,
}

struct Tableau {
    /// `m` constraint rows followed by one objective row; last column is the right-hand side.
    t: Array2<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn rows(&self) -> usize {
        self.basis.len()
    }

    fn rhs(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[[row, col]];
        self.t.row_mut(row).mapv_inplace(|v| v / p);
        let pivot_row = self.t.row(row).to_owned();
        for r in 0..self.t.nrows() {
            if r == row {
                continue;
            }
            let factor = self.t[[r, col]];
            if factor != 0.0 {
                self.t.row_mut(r).scaled_add(-factor, &pivot_row);
                self.t[[r, col]] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations over columns `0..n_cols`. Returns `false` if unbounded.
    fn optimize(&mut self, n_cols: usize) -> bool {
        let obj = self.rows();
        let rhs = self.rhs();
        loop {
            let Some(col) = (0..n_cols).find(|&j| self.t[[obj, j]] < -PIVOT_EPS) else {
                return true;
            };
            let mut best: Option<(f64, usize)> = None;
            for r in 0..obj {
                let a = self.t[[r, col]];
                if a > PIVOT_EPS {
                    let ratio = self.t[[r, rhs]] / a;
                    best = match best {
                        None => Some((ratio, r)),
                        Some((br, brow)) => {
                            if ratio < br - 1e-14 || (ratio <= br + 1e-14 && self.basis[r] < self.basis[brow]) {
                                Some((ratio, r))
                            } else {
                                Some((br, brow))
                            }
                        }
                    };
                }
            }
            match best {
                Some((_, row)) => self.pivot(row, col),
                None => return false,
            }
        }
    }
}

/// Solves `min cᵀx` s.t. `A x = b`, `x ≥ 0`.
pub fn solve_standard(c: &Array1<f64>, a: &Array2<f64>, b: &Array1<f64>) -> Result<LpSolution> {
    let (m, n) = a.dim();
    ensure!(c.len() == n && b.len() == m, Shape, "LP dimensions disagree: A {m}x{n}, b {}, c {}", b.len(), c.len());
    ensure!(
        a.iter().chain(b).chain(c).all(|v| v.is_finite()),
        NonFinite,
        "LP data must be finite"
    );
    // Phase 1 tableau: [A | I | b] with rows sign-flipped so b ≥ 0.
    let width = n + m + 1;
    let mut t = Array2::zeros((m + 1, width));
    for r in 0..m {
        let sign = if b[r] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[[r, j]] = sign * a[[r, j]];
        }
        t[[r, n + r]] = 1.0;
        t[[r, width - 1]] = sign * b[r];
    }
    for r in 0..m {
        for j in 0..n {
            t[[m, j]] -= t[[r, j]];
        }
        t[[m, width - 1]] -= t[[r, width - 1]];
    }
    let mut tab = Tableau { t, basis: (n..n + m).collect() };
    tab.optimize(n + m);
    let infeas = -tab.t[[m, width - 1]];
    let scale = 1.0 + b.iter().map(|v| v.abs()).sum::<f64>();
    ensure!(infeas <= 1e-9 * scale, Lp, "problem is infeasible (phase-one residual {infeas:e})");

    // Drive artificial variables out of the basis where possible.
    let mut keep = vec![true; m];
    for (r, kept) in keep.iter_mut().enumerate() {
        if tab.basis[r] >= n {
            match (0..n).find(|&j| tab.t[[r, j]].abs() > PIVOT_EPS) {
                Some(j) => tab.pivot(r, j),
                None => *kept = false,
            }
        }
    }

    // Phase 2 tableau without artificial columns and redundant rows.
    let rows: Vec<usize> = (0..m).filter(|&r| keep[r]).collect();
    let m2 = rows.len();
    let mut t2 = Array2::zeros((m2 + 1, n + 1));
    let mut basis = Vec::with_capacity(m2);
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..n {
            t2[[i, j]] = tab.t[[r, j]];
        }
        t2[[i, n]] = tab.t[[r, width - 1]];
        basis.push(tab.basis[r]);
    }
    for j in 0..n {
        t2[[m2, j]] = c[j];
    }
    for (i, &bj) in basis.iter().enumerate() {
        let cb = c[bj];
        if cb != 0.0 {
            for j in 0..=n {
                t2[[m2, j]] -= cb * t2[[i, j]];
            }
        }
    }
    let mut tab = Tableau { t: t2, basis };
    if !tab.optimize(n) {
        return Err(Error::Lp("objective is unbounded below".into()));
    }
    let mut x = Array1::zeros(n);
    for (i, &bj) in tab.basis.iter().enumerate() {
        x[bj] = tab.t[[i, n]].max(0.0);
    }
    let objective = c.dot(&x);
    Ok(LpSolution { x, objective })
}
