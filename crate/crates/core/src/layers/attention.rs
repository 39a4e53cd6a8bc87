use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Result};
use crate::TimeSeriesMatrix;

/// Additive value placed on masked logits before the softmax.
pub const DEFAULT_NEG_LARGE: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionKind {
    Regular,
    Sparse,
    Causal { rfs: usize },
}

/// Multi-head attention weights. Projections are `n_i x n_a` (and `n_a x n_i`
/// for the output); heads take contiguous column blocks of width `n_a / n_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
    pub n_heads: usize,
    pub kind: AttentionKind,
    pub neg_large: f64,
}

impl AttentionParams {
    pub fn in_channels(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.wq.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (n_i, n_a) = self.wq.dim();
        for (name, w) in [("wk", &self.wk), ("wv", &self.wv)] {
            ensure!(
                w.dim() == (n_i, n_a),
                Shape,
                "{name} is {:?}, expected {:?}",
                w.dim(),
                (n_i, n_a)
            );
        }
        ensure!(
            self.wo.dim() == (n_a, n_i),
            Shape,
            "wo is {:?}, expected {:?}",
            self.wo.dim(),
            (n_a, n_i)
        );
        for (name, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv)] {
            ensure!(
                b.len() == n_a,
                Shape,
                "{name} has length {}, expected {n_a}",
                b.len()
            );
        }
        ensure!(
            self.bo.len() == n_i,
            Shape,
            "bo has length {}, expected {n_i}",
            self.bo.len()
        );
        check_heads(n_a, self.n_heads, self.kind)?;
        ensure!(
            self.neg_large > 0.0,
            Config,
            "mask value L must be positive"
        );
        Ok(())
    }

    fn to_vars<F: Real>(&self, g: &mut Graph<F>) -> AttentionVars {
        let mat = |g: &mut Graph<F>, m: &Array2<f64>| {
            g.constant(m.clone().insert_axis(ndarray::Axis(0)).mapv(F::lit))
        };
        let row = |g: &mut Graph<F>, v: &Array1<f64>| {
            let n = v.len();
            g.constant(
                v.clone()
                    .into_shape_with_order((1, 1, n))
                    .expect("vector")
                    .mapv(F::lit),
            )
        };
        AttentionVars {
            wq: mat(g, &self.wq),
            wk: mat(g, &self.wk),
            wv: mat(g, &self.wv),
            wo: mat(g, &self.wo),
            bq: row(g, &self.bq),
            bk: row(g, &self.bk),
            bv: row(g, &self.bv),
            bo: row(g, &self.bo),
        }
    }
}

pub(crate) fn check_heads(n_a: usize, n_heads: usize, kind: AttentionKind) -> Result<()> {
    ensure!(
        n_heads >= 1 && n_a.is_multiple_of(n_heads),
        Config,
        "hidden size {n_a} not divisible by {n_heads} heads"
    );
    if kind == AttentionKind::Sparse {
        ensure!(
            n_heads.is_multiple_of(4),
            Config,
            "sparse attention needs a multiple of 4 heads, got {n_heads}"
        );
    }
    if let AttentionKind::Causal { rfs } = kind {
        ensure!(rfs >= 1, Config, "causal attention needs rfs >= 1");
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
}

/// Which positions each head may attend to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMask {
    None,
    /// Head `h` (0-based) uses sparse pattern `h % 4`.
    Sparse {
        neg_large: f64,
    },
    /// Row `i` sees rows `i - rfs + 1 ..= i`; only rows `rfs - 1 ..` are returned.
    Causal {
        rfs: usize,
        neg_large: f64,
    },
}

fn isqrt(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s > n {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= n {
        s += 1;
    }
    s
}

/// The four strided patterns (left/right floor, left/right repetitive) for a
/// sequence of length `n_l`. `true` marks an allowed position; indices follow
/// the 1-based convention with stride `floor(sqrt(n_l))`.
pub fn build_sparse_masks(n_l: usize) -> [Array2<bool>; 4] {
    let s = isqrt(n_l).max(1);
    let block = |i: usize, j: usize| (i - 1) / s == (j - 1) / s;
    let make = |f: &dyn Fn(usize, usize) -> bool| {
        Array2::from_shape_fn((n_l, n_l), |(r, c)| f(r + 1, c + 1))
    };
    [
        make(&|i, j| block(i, j) && i >= j),
        make(&|i, j| block(i, j) && i <= j),
        make(&|i, j| j % s == 0 || i == j),
        make(&|i, j| j % s == 1 || i == j),
    ]
}

/// Additive band mask for causal attention, restricted to the returned rows:
/// entry `(r, j)` with `i = r + rfs - 1` is 0 iff `0 <= i - j <= rfs - 1`.
pub fn causal_band_mask(n_l: usize, rfs: usize, neg_large: f64) -> Array2<f64> {
    let n_out = n_l + 1 - rfs;
    Array2::from_shape_fn((n_out, n_l), |(r, j)| {
        let i = r + rfs - 1;
        if j <= i && i - j < rfs {
            0.0
        } else {
            -neg_large
        }
    })
}

fn additive(mask: &Array2<bool>, neg_large: f64) -> Array2<f64> {
    mask.mapv(|ok| if ok { 0.0 } else { -neg_large })
}

/// Multi-head attention without the `1/sqrt(d)` logit scaling.
pub fn attention_graph<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &AttentionVars,
    n_heads: usize,
    mask: AttentionMask,
) -> Var {
    let [_, n_l, _] = g.shape(x);
    let n_a = g.shape(p.wq)[2];
    let head = n_a / n_heads;

    let query_rows = match mask {
        AttentionMask::Causal { rfs, .. } => {
            assert!(n_l >= rfs, "causal attention input shorter than rfs");
            g.slice(x, 1, rfs - 1, n_l + 1 - rfs)
        }
        _ => x,
    };
    let q = g.matmul(query_rows, p.wq);
    let q = g.add(q, p.bq);
    let k = g.matmul(x, p.wk);
    let k = g.add(k, p.bk);
    let v = g.matmul(x, p.wv);
    let v = g.add(v, p.bv);

    let sparse = match mask {
        AttentionMask::Sparse { neg_large } => {
            let masks = build_sparse_masks(n_l);
            Some(masks.map(|m| {
                additive(&m, neg_large)
                    .insert_axis(ndarray::Axis(0))
                    .mapv(F::lit)
            }))
        }
        _ => None,
    };
    let band = match mask {
        AttentionMask::Causal { rfs, neg_large } => {
            let m = causal_band_mask(n_l, rfs, neg_large)
                .insert_axis(ndarray::Axis(0))
                .mapv(F::lit);
            Some(g.constant(m))
        }
        _ => None,
    };
    let sparse_vars: Option<Vec<Var>> =
        sparse.map(|ms| ms.into_iter().map(|m| g.constant(m)).collect());

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice(q, 2, h * head, head);
        let kh = g.slice(k, 2, h * head, head);
        let vh = g.slice(v, 2, h * head, head);
        let kt = g.transpose(kh);
        let mut logits = g.matmul(qh, kt);
        if let Some(b) = band {
            logits = g.add(logits, b);
        }
        if let Some(ms) = &sparse_vars {
            logits = g.add(logits, ms[h % 4]);
        }
        let weights = g.softmax(logits);
        heads.push(g.matmul(weights, vh));
    }
    let a = g.concat(&heads, 2);
    let o = g.matmul(a, p.wo);
    g.add(o, p.bo)
}

fn run(
    input: &TimeSeriesMatrix,
    p: &AttentionParams,
    mask: AttentionMask,
) -> Result<TimeSeriesMatrix> {
    p.validate()?;
    ensure!(
        input.channels() == p.in_channels(),
        Shape,
        "input has {} channels, attention expects {}",
        input.channels(),
        p.in_channels()
    );
    let mut g = Graph::<f64>::new();
    let x = g.constant(input.to_batch());
    let vars = p.to_vars(&mut g);
    let y = attention_graph(&mut g, x, &vars, p.n_heads, mask);
    let shift = match mask {
        AttentionMask::Causal { rfs, .. } => rfs as i64 - 1,
        _ => 0,
    };
    TimeSeriesMatrix::from_batch(g.value(y), input.time_offset() + shift)
}

pub fn attention_regular(
    input: &TimeSeriesMatrix,
    p: &AttentionParams,
) -> Result<TimeSeriesMatrix> {
    ensure!(
        p.kind == AttentionKind::Regular,
        Config,
        "expected regular attention parameters"
    );
    run(input, p, AttentionMask::None)
}

pub fn attention_sparse(input: &TimeSeriesMatrix, p: &AttentionParams) -> Result<TimeSeriesMatrix> {
    ensure!(
        p.kind == AttentionKind::Sparse,
        Config,
        "expected sparse attention parameters"
    );
    run(
        input,
        p,
        AttentionMask::Sparse {
            neg_large: p.neg_large,
        },
    )
}

pub fn attention_causal(input: &TimeSeriesMatrix, p: &AttentionParams) -> Result<TimeSeriesMatrix> {
    let AttentionKind::Causal { rfs } = p.kind else {
        return Err(crate::Error::Config(
            "expected causal attention parameters".into(),
        ));
    };
    ensure!(
        input.len() >= rfs,
        TooShort,
        "input length {} shorter than rfs {rfs}",
        input.len()
    );
    run(
        input,
        p,
        AttentionMask::Causal {
            rfs,
            neg_large: p.neg_large,
        },
    )
}
