use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Result};

/// Variance floor for batch and layer normalization.
pub const BN_EPS: f64 = 1e-5;
/// Floor on the spectral-norm estimate.
pub const SN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Eval,
}

/// State carried by a normalization layer between calls.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub kind: NormKind,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub momentum: f64,
    pub power_iter_vector: Array1<f64>,
    pub mode: NormMode,
}

impl NormState {
    pub fn batch(channels: usize) -> Self {
        Self {
            kind: NormKind::Batch,
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            momentum: 0.1,
            power_iter_vector: Array1::zeros(0),
            mode: NormMode::Train,
        }
    }

    pub fn layer(channels: usize) -> Self {
        Self {
            kind: NormKind::Layer,
            ..Self::batch(channels)
        }
    }

    /// Spectral state for a matrix with `rows` rows, starting from `u0`
    /// (normalized here; a zero vector falls back to the first basis vector).
    pub fn spectral(u0: Array1<f64>) -> Self {
        let n = u0.len();
        let mut u = normalized(&u0);
        if u.iter().all(|&x| x == 0.0) && n > 0 {
            u[0] = 1.0;
        }
        Self {
            kind: NormKind::Spectral,
            running_mean: Array1::zeros(0),
            running_var: Array1::zeros(0),
            gamma: Array1::zeros(0),
            beta: Array1::zeros(0),
            momentum: 0.0,
            power_iter_vector: u,
            mode: NormMode::Train,
        }
    }
}

fn normalized(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// One power-iteration step for the top singular pair of `w`.
///
/// Returns the updated left vector, the right vector and the estimate
/// `u_newᵀ w v`, floored at [`SN_EPS`].
pub fn power_iteration_step(w: &Array2<f64>, u: &Array1<f64>) -> (Array1<f64>, Array1<f64>, f64) {
    let v = normalized(&w.t().dot(u));
    let wv = w.dot(&v);
    let u_new = normalized(&wv);
    let sigma = u_new.dot(&wv).max(SN_EPS);
    (u_new, v, sigma)
}

/// Divides `weight` by its spectral-norm estimate after one power step.
pub fn spectral_normalize(weight: &Array2<f64>, state: &mut NormState) -> Result<Array2<f64>> {
    ensure!(
        state.kind == NormKind::Spectral,
        Config,
        "spectral_normalize needs a spectral state"
    );
    let (r, c) = weight.dim();
    ensure!(r >= 1 && c >= 1, Shape, "weight must be at least 1x1");
    ensure!(
        state.power_iter_vector.len() == r,
        Shape,
        "power-iteration vector has length {}, weight has {r} rows",
        state.power_iter_vector.len()
    );
    let (u, _, sigma) = power_iteration_step(weight, &state.power_iter_vector);
    if state.mode == NormMode::Train {
        state.power_iter_vector = u;
    }
    Ok(weight / sigma)
}

/// Graph form of spectral normalization. `w` is `(1, rows, cols)`; the power
/// vectors are treated as constants so gradients flow only through `w`.
pub fn spectral_normalize_graph<F: Real>(
    g: &mut Graph<F>,
    w: Var,
    u: &Array1<f64>,
) -> (Var, Array1<f64>) {
    let wv = g.value(w).index_axis(Axis(0), 0).mapv(Real::to_f64_lossy);
    let (u_new, v, sigma) = power_iteration_step(&wv, u);
    let sigma_var = if sigma > SN_EPS {
        let outer = Array3::from_shape_fn((1, u_new.len(), v.len()), |(_, i, j)| {
            F::lit(u_new[i] * v[j])
        });
        let outer = g.constant(outer);
        let prod = g.mul(w, outer);
        g.sum_all(prod)
    } else {
        g.scalar(F::lit(SN_EPS))
    };
    let inv = g.powf(sigma_var, -1.0);
    (g.mul(w, inv), u_new)
}

/// Batch statistics over `(batch, time)` per channel.
pub fn batch_norm_train_graph<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> (Var, Array1<f64>, Array1<f64>) {
    let [b, t, c] = g.shape(x);
    let count = (b * t) as f64;
    let sum = g.sum_to(x, [1, 1, c]);
    let mean = g.scale(sum, 1.0 / count);
    let centred = g.sub(x, mean);
    let sq = g.powf(centred, 2.0);
    let ss = g.sum_to(sq, [1, 1, c]);
    let var = g.scale(ss, 1.0 / count);
    let var_eps = g.add_scalar(var, BN_EPS);
    let inv_std = g.powf(var_eps, -0.5);
    let normed = g.mul(centred, inv_std);
    let scaled = g.mul(normed, gamma);
    let out = g.add(scaled, beta);
    let to_vec = |a: &Array3<F>| a.iter().map(|v| v.to_f64_lossy()).collect::<Array1<f64>>();
    let mean_v = to_vec(g.value(mean));
    let var_v = to_vec(g.value(var));
    (out, mean_v, var_v)
}

/// Frozen-statistics batch norm: a fixed per-channel affine map of `x`.
pub fn batch_norm_eval_graph<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
) -> Var {
    let c = running_mean.len();
    let mean = g.constant(Array3::from_shape_fn((1, 1, c), |(_, _, j)| {
        F::lit(running_mean[j])
    }));
    let inv = g.constant(Array3::from_shape_fn((1, 1, c), |(_, _, j)| {
        F::lit(1.0 / (running_var[j] + BN_EPS).sqrt())
    }));
    let centred = g.sub(x, mean);
    let normed = g.mul(centred, inv);
    let scaled = g.mul(normed, gamma);
    g.add(scaled, beta)
}

/// Per-row normalization across channels.
pub fn layer_norm_graph<F: Real>(g: &mut Graph<F>, x: Var, gamma: Var, beta: Var) -> Var {
    let [b, t, c] = g.shape(x);
    let sum = g.sum_to(x, [b, t, 1]);
    let mean = g.scale(sum, 1.0 / c as f64);
    let centred = g.sub(x, mean);
    let sq = g.powf(centred, 2.0);
    let ss = g.sum_to(sq, [b, t, 1]);
    let var = g.scale(ss, 1.0 / c as f64);
    let var_eps = g.add_scalar(var, BN_EPS);
    let inv_std = g.powf(var_eps, -0.5);
    let normed = g.mul(centred, inv_std);
    let scaled = g.mul(normed, gamma);
    g.add(scaled, beta)
}

/// Batch normalization of a `(batch, time, channels)` array.
///
/// Train mode normalizes with the batch statistics and folds them into the
/// running estimates (unbiased variance, `state.momentum`). Eval mode uses
/// the running estimates only.
pub fn batch_norm(input: &Array3<f64>, state: &mut NormState) -> Result<Array3<f64>> {
    ensure!(
        state.kind == NormKind::Batch,
        Config,
        "batch_norm needs a batch-norm state"
    );
    let (b, t, c) = input.dim();
    ensure!(
        state.running_mean.len() == c,
        Shape,
        "state has {} channels, input {c}",
        state.running_mean.len()
    );
    let mut g = Graph::<f64>::new();
    let x = g.constant(input.clone());
    let gamma = g.constant(
        state
            .gamma
            .clone()
            .into_shape_with_order((1, 1, c))
            .expect("vector"),
    );
    let beta = g.constant(
        state
            .beta
            .clone()
            .into_shape_with_order((1, 1, c))
            .expect("vector"),
    );
    match state.mode {
        NormMode::Train => {
            ensure!(
                b >= 2,
                Config,
                "batch norm in train mode needs at least 2 samples, got {b}"
            );
            let (y, mean, var) = batch_norm_train_graph(&mut g, x, gamma, beta);
            let n = (b * t) as f64;
            let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var };
            let m = state.momentum;
            state.running_mean = &state.running_mean * (1.0 - m) + &mean * m;
            state.running_var = &state.running_var * (1.0 - m) + &unbiased * m;
            Ok(g.value(y).clone())
        }
        NormMode::Eval => {
            let y = batch_norm_eval_graph(
                &mut g,
                x,
                gamma,
                beta,
                &state.running_mean,
                &state.running_var,
            );
            Ok(g.value(y).clone())
        }
    }
}
