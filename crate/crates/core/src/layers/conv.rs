use std::rc::Rc;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Result};
use crate::TimeSeriesMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Regular,
    Causal,
}

/// One-dimensional convolution weights, `weight[k, i, o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub kind: ConvKind,
}

impl ConvParams {
    pub fn kernel(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().2
    }

    fn validate(&self) -> Result<()> {
        let (k, _, o) = self.weight.dim();
        ensure!(k >= 1, Config, "kernel size must be positive");
        ensure!(
            self.bias.len() == o,
            Shape,
            "bias length {} != out channels {o}",
            self.bias.len()
        );
        ensure!(self.stride >= 1, Config, "stride must be positive");
        if self.kind == ConvKind::Regular {
            ensure!(
                k % 2 == 1,
                Config,
                "regular convolution needs an odd kernel, got {k}"
            );
        }
        Ok(())
    }

    fn to_vars<F: Real>(&self, g: &mut Graph<F>) -> ConvVars {
        let (k, i, o) = self.weight.dim();
        let w = self
            .weight
            .clone()
            .into_shape_with_order((1, k * i, o))
            .expect("contiguous weight");
        ConvVars {
            weight: g.constant(w.mapv(F::lit)),
            bias: g.constant(
                self.bias
                    .clone()
                    .into_shape_with_order((1, 1, o))
                    .expect("bias")
                    .mapv(F::lit),
            ),
            kernel: k,
        }
    }
}

/// Tape handles for a convolution. `weight` is stored flattened as
/// `(1, kernel * in_channels, out_channels)` with tap-major rows.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
}

fn tap_weight<F: Real>(g: &mut Graph<F>, p: &ConvVars, tap: usize, n_in: usize) -> Var {
    g.slice(p.weight, 1, tap * n_in, n_in)
}

/// Causal convolution: output row `t` reads input rows `t .. t + kernel - 1`
/// (the output is `kernel - 1` rows shorter than the input).
pub fn conv_causal_graph<F: Real>(g: &mut Graph<F>, x: Var, p: &ConvVars) -> Var {
    let [_, n_l, n_in] = g.shape(x);
    assert!(n_l >= p.kernel, "causal conv input shorter than kernel");
    let n_out = n_l - p.kernel + 1;
    let mut acc: Option<Var> = None;
    for tap in 0..p.kernel {
        let rows = g.slice(x, 1, tap, n_out);
        let w = tap_weight(g, p, tap, n_in);
        let y = g.matmul(rows, w);
        acc = Some(match acc {
            Some(a) => g.add(a, y),
            None => y,
        });
    }
    let acc = acc.expect("kernel >= 1");
    g.add(acc, p.bias)
}

/// Regular convolution with edge-replication padding and stride.
///
/// Output row `r` (0-based) reads input rows
/// `stride * r - (kernel - 1) / 2 + tap`, clamped into range.
pub fn conv_regular_graph<F: Real>(g: &mut Graph<F>, x: Var, p: &ConvVars, stride: usize) -> Var {
    let [_, n_l, n_in] = g.shape(x);
    let n_out = n_l / stride;
    assert!(n_out >= 1, "regular conv output would be empty");
    let half = (p.kernel as i64 - 1) / 2;
    let mut acc: Option<Var> = None;
    for tap in 0..p.kernel {
        let idx: Vec<usize> = (0..n_out)
            .map(|r| {
                let src = (stride * r) as i64 - half + tap as i64;
                src.clamp(0, n_l as i64 - 1) as usize
            })
            .collect();
        let identity = stride == 1 && idx.iter().enumerate().all(|(r, &i)| r == i) && n_out == n_l;
        let rows = if identity {
            x
        } else {
            g.gather_rows(x, Rc::from(idx))
        };
        let w = tap_weight(g, p, tap, n_in);
        let y = g.matmul(rows, w);
        acc = Some(match acc {
            Some(a) => g.add(a, y),
            None => y,
        });
    }
    let acc = acc.expect("kernel >= 1");
    g.add(acc, p.bias)
}

pub fn conv_regular(input: &TimeSeriesMatrix, p: &ConvParams) -> Result<TimeSeriesMatrix> {
    ensure!(
        p.kind == ConvKind::Regular,
        Config,
        "conv_regular called with {:?} parameters",
        p.kind
    );
    p.validate()?;
    ensure!(
        input.channels() == p.in_channels(),
        Shape,
        "input has {} channels, weight expects {}",
        input.channels(),
        p.in_channels()
    );
    ensure!(
        input.len() / p.stride >= 1,
        TooShort,
        "input length {} < stride {}",
        input.len(),
        p.stride
    );
    let mut g = Graph::<f64>::new();
    let x = g.constant(input.to_batch());
    let vars = p.to_vars(&mut g);
    let y = conv_regular_graph(&mut g, x, &vars, p.stride);
    TimeSeriesMatrix::from_batch(g.value(y), input.time_offset())
}

pub fn conv_causal(input: &TimeSeriesMatrix, p: &ConvParams) -> Result<TimeSeriesMatrix> {
    ensure!(
        p.kind == ConvKind::Causal,
        Config,
        "conv_causal called with {:?} parameters",
        p.kind
    );
    p.validate()?;
    ensure!(
        input.channels() == p.in_channels(),
        Shape,
        "input has {} channels, weight expects {}",
        input.channels(),
        p.in_channels()
    );
    ensure!(
        input.len() >= p.kernel(),
        TooShort,
        "input length {} shorter than kernel {}",
        input.len(),
        p.kernel()
    );
    let mut g = Graph::<f64>::new();
    let x = g.constant(input.to_batch());
    let vars = p.to_vars(&mut g);
    let y = conv_causal_graph(&mut g, x, &vars);
    TimeSeriesMatrix::from_batch(g.value(y), input.time_offset() + p.kernel() as i64 - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn identity_params(n: usize, kind: ConvKind) -> ConvParams {
        let mut w = Array3::zeros((1, n, n));
        for i in 0..n {
            w[[0, i, i]] = 1.0;
        }
        ConvParams {
            weight: w,
            bias: Array1::zeros(n),
            stride: 1,
            kind,
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = TimeSeriesMatrix::new(array![[1.0, 2.0], [3.0, -4.0], [0.5, 0.25]]).unwrap();
        let y = conv_regular(&x, &identity_params(2, ConvKind::Regular)).unwrap();
        assert_eq!(y.values(), x.values());
        let y = conv_causal(&x, &identity_params(2, ConvKind::Causal)).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn fig_topologies() {
        let x = TimeSeriesMatrix::new(Array2::from_shape_fn((6, 1), |(i, _)| i as f64)).unwrap();
        let reg = ConvParams {
            weight: Array3::from_elem((3, 1, 2), 0.5),
            bias: Array1::zeros(2),
            stride: 1,
            kind: ConvKind::Regular,
        };
        assert_eq!(conv_regular(&x, &reg).unwrap().len(), 6);
        let causal = ConvParams {
            kind: ConvKind::Causal,
            ..reg
        };
        let y = conv_causal(&x, &causal).unwrap();
        assert_eq!(y.len(), 4);
        assert_eq!(y.time_offset(), 2);
    }

    #[test]
    fn errors() {
        let x = TimeSeriesMatrix::new(Array2::zeros((2, 1))).unwrap();
        let even = ConvParams {
            weight: Array3::zeros((2, 1, 1)),
            bias: Array1::zeros(1),
            stride: 1,
            kind: ConvKind::Regular,
        };
        assert!(conv_regular(&x, &even).is_err());
        let long = ConvParams {
            weight: Array3::zeros((3, 1, 1)),
            kind: ConvKind::Causal,
            ..even.clone()
        };
        assert!(matches!(
            conv_causal(&x, &long),
            Err(crate::Error::TooShort(_))
        ));
        let wrong = ConvParams {
            weight: Array3::zeros((1, 2, 1)),
            kind: ConvKind::Causal,
            ..even
        };
        assert!(matches!(
            conv_causal(&x, &wrong),
            Err(crate::Error::Shape(_))
        ));
    }
}
