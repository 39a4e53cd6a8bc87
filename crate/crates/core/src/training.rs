//! Rolling-window datasets, the adversarial training loop and path sampling.

use std::path::PathBuf;

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::error::{ensure, Error, Result};
use crate::layers::NormMode;
use crate::losses::{
    discriminator_loss_graph, generator_loss_graph, gp_interpolate_batch, gradient_penalty_graph, LossConfig,
    LossKind,
};
use crate::metrics::{self, ScoreReport};
use crate::networks::{forward, generate_batch, split_rfs, DiscriminatorSpec, GeneratorSpec, NetworkInstance};
use crate::{PathBundle, TimeSeriesMatrix};

/// All length-`l` windows of a `T x d` series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    source: Array2<f64>,
    l: usize,
}

pub fn make_windows(series: &TimeSeriesMatrix, l: usize) -> Result<WindowDataset> {
    ensure!(l >= 1, Config, "window length must be positive");
    ensure!(series.len() >= l, TooShort, "series length {} shorter than window {l}", series.len());
    Ok(WindowDataset { source: series.values().clone(), l })
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.source.nrows() + 1 - self.l
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn window_length(&self) -> usize {
        self.l
    }

    pub fn channels(&self) -> usize {
        self.source.ncols()
    }

    pub fn source(&self) -> &Array2<f64> {
        &self.source
    }

    /// Window `i` (0-based): rows `i .. i + l`.
    pub fn window(&self, i: usize) -> ArrayView2<'_, f64> {
        self.source.slice(s![i..i + self.l, ..])
    }

    /// Uniformly drawn window index.
    pub fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.len())
    }

    pub fn batch(&self, indices: &[usize]) -> Array3<f64> {
        let mut out = Array3::zeros((indices.len(), self.l, self.channels()));
        for (mut o, &i) in out.axis_iter_mut(Axis(0)).zip(indices) {
            o.assign(&self.window(i));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Discriminator steps per iteration; defaults to 5 (WGAN-GP) or 1 (original).
    pub n_critic: Option<usize>,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Adam moment coefficients; defaults to (0, 0.9) for WGAN-GP and (0.5, 0.9) otherwise.
    pub betas: Option<(f64, f64)>,
    pub loss: LossConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Standardize each channel for training and fold the map into the generator output.
    pub standardize: bool,
    pub eval_every: usize,
    pub eval_paths: usize,
    pub eval_length: usize,
    pub eval_delta: usize,
    /// Directory for checkpoints written when a loss turns non-finite.
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 20_000,
            n_critic: None,
            lr_g: 1e-4,
            lr_d: 1e-4,
            betas: None,
            loss: LossConfig::default(),
            seed: 0,
            precision: Precision::F32,
            standardize: true,
            eval_every: 0,
            eval_paths: 64,
            eval_length: 1024,
            eval_delta: 250,
            snapshot_dir: None,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single workstation: small batches and 2000 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            iterations: 2000,
            n_critic: Some(5),
            ..Self::default()
        }
    }

    pub fn critic_steps(&self) -> usize {
        self.n_critic.unwrap_or(match self.loss.kind {
            LossKind::WganGp => 5,
            LossKind::Original => 1,
        })
    }

    pub fn adam_betas(&self) -> (f64, f64) {
        self.betas.unwrap_or(match self.loss.kind {
            LossKind::WganGp => (0.0, 0.9),
            LossKind::Original => (0.5, 0.9),
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.lr_g > 0.0 && self.lr_d > 0.0, Config, "learning rates must be positive");
        ensure!(self.critic_steps() >= 1, Config, "need at least one discriminator step");
        let (b1, b2) = self.adam_betas();
        ensure!((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2), Config, "Adam betas must lie in [0, 1)");
        ensure!(self.loss.lambda >= 0.0, Config, "penalty weight must be nonnegative");
        Ok(())
    }
}

/// A two-block TTGAN generator small enough to train on a laptop CPU.
pub fn desk_generator(l: usize, f: usize, d: usize) -> GeneratorSpec {
    let mut s = GeneratorSpec::ttgan(l, f, d);
    s.d_h = 32;
    s.layers = 2;
    s.per_layer_rfs = split_rfs(f, 2);
    s.n_a = 16;
    s.n_m = 32;
    s
}

/// Discriminator matching [`desk_generator`]: one sparse-attention block.
pub fn desk_discriminator(l: usize, d: usize) -> DiscriminatorSpec {
    let mut s = DiscriminatorSpec::ttgan(l, d);
    s.d_h = 32;
    s.layers = 1;
    s.n_a = 16;
    s.n_m = 32;
    s
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    pub grad_penalty_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    /// Newline-delimited JSON, one record per iteration.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Adaptive-moment optimizer over a named parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: IndexMap<String, Array3<f64>>,
    v: IndexMap<String, Array3<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// Updates `params` in place; results are rounded to single precision.
    pub fn step(&mut self, params: &mut IndexMap<String, Array3<f64>>, grads: &IndexMap<String, Array3<f64>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, grad) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Array3::zeros(grad.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array3::zeros(grad.raw_dim()));
            ndarray::Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = (*p - step) as f32 as f64;
            });
        }
    }
}

fn check_compatible(g: &NetworkInstance, d: &NetworkInstance, data: &WindowDataset) -> Result<()> {
    let gs = g.generator_spec().ok_or_else(|| Error::Config("first network must be a generator".into()))?;
    let ds = d.discriminator_spec().ok_or_else(|| Error::Config("second network must be a discriminator".into()))?;
    ensure!(gs.l == ds.l, Config, "generator length {} differs from discriminator length {}", gs.l, ds.l);
    ensure!(gs.l == data.l, Config, "network length {} differs from window length {}", gs.l, data.l);
    ensure!(gs.d == ds.d, Config, "generator emits {} channels, discriminator expects {}", gs.d, ds.d);
    ensure!(gs.d == data.channels(), Config, "data has {} channels, networks expect {}", data.channels(), gs.d);
    Ok(())
}

fn standardizer(data: &WindowDataset, enabled: bool) -> (Array1<f64>, Array1<f64>) {
    let d = data.channels();
    if !enabled {
        return (Array1::zeros(d), Array1::ones(d));
    }
    let mean = data.source.mean_axis(Axis(0)).expect("nonempty");
    let std = data.source.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    (mean.mapv(|v| v as f32 as f64), std.mapv(|v| v as f32 as f64))
}

fn draw_noise<R: Rng>(rng: &mut R, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn collect_grads<F: Real>(g: &Graph<F>, bind: &forward::Binding, grads: &[crate::autodiff::Var]) -> IndexMap<String, Array3<f64>> {
    bind.params().zip(grads).map(|((name, _), &gv)| (name.to_string(), g.value(gv).mapv(|x| x.to_f64_lossy()))).collect()
}

fn all_finite(grads: &IndexMap<String, Array3<f64>>) -> bool {
    grads.values().all(|a| a.iter().all(|v| v.is_finite()))
}

struct StepOutcome {
    loss: f64,
    penalty: f64,
    grads: IndexMap<String, Array3<f64>>,
    updates: IndexMap<String, Array1<f64>>,
}

fn discriminator_step<F: Real>(
    g: &NetworkInstance,
    d: &NetworkInstance,
    real: &Array3<f64>,
    noise: &Array3<f64>,
    u: &[f64],
    cfg: &LossConfig,
) -> StepOutcome {
    let mut gr = Graph::<F>::new();
    let mut gb = forward::Binding::new(&mut gr, g, false);
    let z = gr.constant(noise.mapv(F::lit));
    let fake = forward::generator(&mut gr, g, &mut gb, z);
    let fake_val = gr.value(fake).mapv(|x| x.to_f64_lossy());

    let mut db = forward::Binding::new(&mut gr, d, true);
    let xr = gr.constant(real.mapv(F::lit));
    let xf = gr.constant(fake_val.mapv(F::lit));
    let dr = forward::discriminator(&mut gr, d, &mut db, xr);
    let df = forward::discriminator(&mut gr, d, &mut db, xf);
    let mut loss = discriminator_loss_graph(&mut gr, dr, df, cfg);
    let mut penalty = 0.0;
    if cfg.kind == LossKind::WganGp {
        let mix = gp_interpolate_batch(real, &fake_val, u).expect("matching shapes");
        let xt = gr.param(mix.mapv(F::lit));
        let (pen, _) = gradient_penalty_graph(&mut gr, d, &mut db, xt, cfg.lambda);
        penalty = gr.item(pen).to_f64_lossy();
        loss = gr.add(loss, pen);
    }
    let vars = db.param_vars();
    let grads = gr.grad(loss, &vars, false);
    StepOutcome {
        loss: gr.item(loss).to_f64_lossy(),
        penalty,
        grads: collect_grads(&gr, &db, &grads),
        updates: db.into_updates(),
    }
}

fn generator_step<F: Real>(g: &NetworkInstance, d: &NetworkInstance, noise: &Array3<f64>, cfg: &LossConfig) -> StepOutcome {
    let mut gr = Graph::<F>::new();
    let mut gb = forward::Binding::new(&mut gr, g, true);
    let z = gr.constant(noise.mapv(F::lit));
    let fake = forward::generator(&mut gr, g, &mut gb, z);
    let mut db = forward::Binding::new(&mut gr, d, false);
    let df = forward::discriminator(&mut gr, d, &mut db, fake);
    let loss = generator_loss_graph(&mut gr, df, cfg);
    let vars = gb.param_vars();
    let grads = gr.grad(loss, &vars, false);
    StepOutcome {
        loss: gr.item(loss).to_f64_lossy(),
        penalty: 0.0,
        grads: collect_grads(&gr, &gb, &grads),
        updates: gb.into_updates(),
    }
}

fn apply_updates(inst: &mut NetworkInstance, updates: IndexMap<String, Array1<f64>>) {
    for (k, v) in updates {
        inst.buffers.insert(k, v.mapv(|x| x as f32 as f64));
    }
}

fn snapshot(cfg: &TrainConfig, g: &NetworkInstance, d: &NetworkInstance, iter: usize, what: &str) -> Error {
    let mut msg = format!("non-finite {what} at iteration {iter}");
    if let Some(dir) = &cfg.snapshot_dir {
        let saved = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| g.save(dir.join(format!("nan_generator_{iter}.ckpt"))))
            .and_then(|_| d.save(dir.join(format!("nan_discriminator_{iter}.ckpt"))));
        match saved {
            Ok(()) => msg.push_str(&format!("; snapshot written to {}", dir.display())),
            Err(e) => msg.push_str(&format!("; snapshot failed: {e}")),
        }
    }
    Error::NonFinite(msg)
}

/// Progress information passed to the observer of [`train_with`].
pub struct Progress<'a> {
    pub record: &'a HistoryRecord,
    pub total: usize,
}

pub fn train(
    g: &mut NetworkInstance,
    d: &mut NetworkInstance,
    data: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(g, d, data, cfg, |_| {})
}

/// Alternates `n_critic` discriminator updates with one generator update.
///
/// Deterministic for a fixed seed. Both networks are left in eval mode and
/// the generator's output affine maps back to data units.
pub fn train_with(
    g: &mut NetworkInstance,
    d: &mut NetworkInstance,
    data: &WindowDataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&Progress<'_>),
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_compatible(g, d, data)?;
    let gs = g.generator_spec().expect("checked").clone();
    let (mean, std) = standardizer(data, cfg.standardize);
    g.set_output_affine(std.clone(), mean.clone())?;
    let scaled = WindowDataset { source: (&data.source - &mean) / &std, l: data.l };

    let (b1, b2) = cfg.adam_betas();
    let mut opt_g = Adam::new(cfg.lr_g, b1, b2);
    let mut opt_d = Adam::new(cfg.lr_d, b1, b2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.batch_size;
    let noise_shape = (b, gs.l + gs.f - 1, gs.d_n);
    let mut history = TrainHistory::default();

    for iter in 1..=cfg.iterations {
        g.set_mode(NormMode::Train);
        d.set_mode(NormMode::Train);
        let mut loss_d = 0.0;
        let mut penalty = 0.0;
        for _ in 0..cfg.critic_steps() {
            let idx: Vec<usize> = (0..b).map(|_| scaled.sample_index(&mut rng)).collect();
            let real = scaled.batch(&idx);
            let noise = draw_noise(&mut rng, noise_shape);
            let u: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
            let out = match cfg.precision {
                Precision::F32 => discriminator_step::<f32>(g, d, &real, &noise, &u, &cfg.loss),
                Precision::F64 => discriminator_step::<f64>(g, d, &real, &noise, &u, &cfg.loss),
            };
            if !out.loss.is_finite() || !all_finite(&out.grads) {
                g.set_mode(NormMode::Eval);
                d.set_mode(NormMode::Eval);
                return Err(snapshot(cfg, g, d, iter, "discriminator loss"));
            }
            opt_d.step(&mut d.params, &out.grads);
            apply_updates(d, out.updates);
            loss_d = out.loss;
            penalty = out.penalty;
        }
        let noise = draw_noise(&mut rng, noise_shape);
        let out = match cfg.precision {
            Precision::F32 => generator_step::<f32>(g, d, &noise, &cfg.loss),
            Precision::F64 => generator_step::<f64>(g, d, &noise, &cfg.loss),
        };
        if !out.loss.is_finite() || !all_finite(&out.grads) {
            g.set_mode(NormMode::Eval);
            d.set_mode(NormMode::Eval);
            return Err(snapshot(cfg, g, d, iter, "generator loss"));
        }
        opt_g.step(&mut g.params, &out.grads);
        apply_updates(g, out.updates);
        g.set_mode(NormMode::Eval);
        d.set_mode(NormMode::Eval);

        let scores = if cfg.eval_every > 0 && iter % cfg.eval_every == 0 {
            let bundle = sample_paths(g, cfg.eval_paths.max(1), cfg.eval_length.max(gs.l), cfg.seed ^ iter as u64)?;
            Some(metrics::path_scores(data.source(), &bundle, cfg.eval_delta)?)
        } else {
            None
        };
        history.records.push(HistoryRecord { iter, loss_g: out.loss, loss_d, grad_penalty_mean: penalty, scores });
        observer(&Progress { record: history.records.last().expect("pushed"), total: cfg.iterations });
    }
    g.set_mode(NormMode::Eval);
    d.set_mode(NormMode::Eval);
    Ok(history)
}

/// Paths generated per call to the network when sampling.
const SAMPLE_CHUNK: usize = 16;

/// Generates `n_paths` paths of length `length` by stitching windows of the
/// generator's native length from one shared noise stream per path.
pub fn sample_paths(g: &NetworkInstance, n_paths: usize, length: usize, seed: u64) -> Result<PathBundle> {
    let spec = g.generator_spec().ok_or_else(|| Error::Config("not a generator".into()))?;
    ensure!(g.mode == NormMode::Eval, Config, "sampling requires eval mode");
    ensure!(n_paths >= 1 && length >= 1, Config, "need at least one path of positive length");
    let (l, f) = (spec.l, spec.f);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = draw_noise(&mut rng, (n_paths, length + f - 1, spec.d_n));
    let mut paths = Array3::zeros((n_paths, length, spec.d));
    for first in (0..n_paths).step_by(SAMPLE_CHUNK) {
        let last = (first + SAMPLE_CHUNK).min(n_paths);
        let mut start = 0;
        while start < length {
            let len = l.min(length - start);
            let z = noise.slice(s![first..last, start..start + len + f - 1, ..]).to_owned();
            let y = generate_batch(g, &z)?;
            paths.slice_mut(s![first..last, start..start + len, ..]).assign(&y);
            start += len;
        }
    }
    PathBundle::new(paths, seed, format!("{:?}-{}", spec.family, g.seed).to_lowercase())
}
