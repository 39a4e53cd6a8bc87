//! Adversarial objectives.
//!
//! Scalar functions here take discriminator outputs as plain numbers; the
//! `*_graph` variants build the same quantities on a tape for training.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Result};
use crate::networks::{forward, NetworkInstance};
use crate::TimeSeriesMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Original,
    WganGp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::WganGp, lambda: 10.0 }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// Non-saturating `-ln σ(d_f)` for the original loss, `-d_f` for WGAN-GP.
pub fn generator_loss(d_f: &[f64], cfg: &LossConfig) -> Result<f64> {
    ensure!(!d_f.is_empty(), Shape, "empty discriminator output");
    Ok(match cfg.kind {
        LossKind::Original => mean(d_f.iter().map(|&x| softplus(-x))),
        LossKind::WganGp => mean(d_f.iter().map(|&x| -x)),
    })
}

pub fn discriminator_loss(d_r: &[f64], d_f: &[f64], grad_norms: Option<&[f64]>, cfg: &LossConfig) -> Result<f64> {
    ensure!(!d_r.is_empty() && d_r.len() == d_f.len(), Shape, "real and fake batches must be nonempty and equal");
    match cfg.kind {
        LossKind::Original => {
            Ok(mean(d_r.iter().zip(d_f).map(|(&r, &f)| softplus(-r) + softplus(f))))
        }
        LossKind::WganGp => {
            let norms = grad_norms.ok_or_else(|| crate::Error::Config("WGAN-GP loss needs gradient norms".into()))?;
            ensure!(norms.len() == d_r.len(), Shape, "one gradient norm per sample is required");
            Ok(mean(
                d_r.iter()
                    .zip(d_f)
                    .zip(norms)
                    .map(|((&r, &f), &gn)| -r + f + cfg.lambda * (gn - 1.0).powi(2)),
            ))
        }
    }
}

/// `(1 - u_i) x_i + u_i y_i` with one draw per batch element.
pub fn gp_interpolate_batch(x: &Array3<f64>, y: &Array3<f64>, u: &[f64]) -> Result<Array3<f64>> {
    ensure!(x.dim() == y.dim(), Shape, "real {:?} and fake {:?} shapes differ", x.dim(), y.dim());
    ensure!(u.len() == x.dim().0, Shape, "need {} interpolation weights, got {}", x.dim().0, u.len());
    let mut out = x.clone();
    for ((mut o, yi), &ui) in out.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(u) {
        o.zip_mut_with(&yi, |a, &b| *a = (1.0 - ui) * *a + ui * b);
    }
    Ok(out)
}

pub fn gp_interpolate(x: &TimeSeriesMatrix, y: &TimeSeriesMatrix, u: f64) -> Result<TimeSeriesMatrix> {
    let out = gp_interpolate_batch(&x.to_batch(), &y.to_batch(), &[u])?;
    TimeSeriesMatrix::with_offset(out.index_axis(Axis(0), 0).to_owned(), x.time_offset())
}

/// Frobenius norm of the discriminator's gradient with respect to its input.
pub fn gradient_norm(d: &NetworkInstance, x_tilde: &TimeSeriesMatrix) -> Result<f64> {
    let spec = d.discriminator_spec().ok_or_else(|| crate::Error::Config("not a discriminator".into()))?;
    ensure!(x_tilde.len() == spec.l, Shape, "sample length {} differs from {}", x_tilde.len(), spec.l);
    ensure!(
        x_tilde.channels() == spec.d || x_tilde.channels() == spec.input_width(),
        Shape,
        "sample has {} channels",
        x_tilde.channels()
    );
    let mut g = Graph::<f64>::new();
    let mut bind = forward::Binding::new(&mut g, d, false);
    let x = g.param(x_tilde.to_batch());
    let s = forward::discriminator(&mut g, d, &mut bind, x);
    let total = g.sum_all(s);
    let grad = g.grad(total, &[x], false)[0];
    Ok(g.value(grad).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Mean generator loss on the tape; `d_f` has shape `(batch, 1, 1)`.
pub fn generator_loss_graph<F: Real>(g: &mut Graph<F>, d_f: Var, cfg: &LossConfig) -> Var {
    match cfg.kind {
        LossKind::Original => {
            let neg = g.neg(d_f);
            let sp = g.softplus(neg);
            g.mean_all(sp)
        }
        LossKind::WganGp => {
            let m = g.mean_all(d_f);
            g.neg(m)
        }
    }
}

/// Mean discriminator loss on the tape, without the gradient penalty.
pub fn discriminator_loss_graph<F: Real>(g: &mut Graph<F>, d_r: Var, d_f: Var, cfg: &LossConfig) -> Var {
    match cfg.kind {
        LossKind::Original => {
            let nr = g.neg(d_r);
            let a = g.softplus(nr);
            let b = g.softplus(d_f);
            let s = g.add(a, b);
            g.mean_all(s)
        }
        LossKind::WganGp => {
            let diff = g.sub(d_f, d_r);
            g.mean_all(diff)
        }
    }
}

/// `λ · mean((‖∇D(x̃_i)‖ - 1)²)` on the tape, differentiable with respect to
/// the discriminator parameters. Also returns the per-sample norms.
pub fn gradient_penalty_graph<F: Real>(
    g: &mut Graph<F>,
    d: &NetworkInstance,
    bind: &mut forward::Binding,
    x_tilde: Var,
    lambda: f64,
) -> (Var, Vec<f64>) {
    let [b, _, _] = g.shape(x_tilde);
    let s = forward::discriminator(g, d, bind, x_tilde);
    let total = g.sum_all(s);
    let grad = g.grad(total, &[x_tilde], true)[0];
    let sq = g.powf(grad, 2.0);
    let per = g.sum_to(sq, [b, 1, 1]);
    let per = g.add_scalar(per, 1e-12);
    let norm = g.powf(per, 0.5);
    let norms: Vec<f64> = g.value(norm).iter().map(|v| v.to_f64_lossy()).collect();
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.powf(dev, 2.0);
    let m = g.mean_all(dev2);
    (g.scale(m, lambda), norms)
}
