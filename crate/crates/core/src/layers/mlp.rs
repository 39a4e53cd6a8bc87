use ndarray::{Array1, Array2, Axis};

use super::Activation;
use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Result};
use crate::TimeSeriesMatrix;

/// Two-layer perceptron applied independently to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp_graph<F: Real>(g: &mut Graph<F>, x: Var, p: &MlpVars, activation: Activation) -> Var {
    let h = g.matmul(x, p.w1);
    let h = g.add(h, p.b1);
    let h = activation.apply(g, h);
    let o = g.matmul(h, p.w2);
    g.add(o, p.b2)
}

pub fn mlp_block(input: &TimeSeriesMatrix, p: &MlpParams) -> Result<TimeSeriesMatrix> {
    let (n_i, n_m) = p.w1.dim();
    ensure!(
        input.channels() == n_i,
        Shape,
        "input has {} channels, mlp expects {n_i}",
        input.channels()
    );
    ensure!(
        p.w2.dim() == (n_m, n_i),
        Shape,
        "w2 is {:?}, expected {:?}",
        p.w2.dim(),
        (n_m, n_i)
    );
    ensure!(
        p.b1.len() == n_m && p.b2.len() == n_i,
        Shape,
        "mlp bias lengths do not match"
    );
    let mut g = Graph::<f64>::new();
    let x = g.constant(input.to_batch());
    let vars = MlpVars {
        w1: g.constant(p.w1.clone().insert_axis(Axis(0))),
        b1: g.constant(
            p.b1.clone()
                .into_shape_with_order((1, 1, n_m))
                .expect("vector"),
        ),
        w2: g.constant(p.w2.clone().insert_axis(Axis(0))),
        b2: g.constant(
            p.b2.clone()
                .into_shape_with_order((1, 1, n_i))
                .expect("vector"),
        ),
    };
    let y = mlp_graph(&mut g, x, &vars, p.activation);
    TimeSeriesMatrix::from_batch(g.value(y), input.time_offset())
}
