//! TAGAN and TTGAN generators and discriminators.
//!
//! A [`NetworkInstance`] owns a named parameter store and named buffers
//! (normalization statistics, power-iteration vectors, the generator output
//! affine). The forward passes in [`forward`] bind the store onto a tape.

mod checkpoint;
pub mod forward;
mod init;
mod spec;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::layers::NormMode;
use crate::TimeSeriesMatrix;

pub use spec::{split_rfs, Augment, DiscriminatorSpec, Family, GeneratorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role", content = "spec")]
pub enum NetworkSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

/// A built network: spec, parameters, buffers and the seed used at init.
///
/// Parameters are `(1, rows, cols)` arrays whose entries are always exactly
/// representable in single precision, which makes checkpoints bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance {
    pub spec: NetworkSpec,
    pub params: IndexMap<String, Array3<f64>>,
    pub buffers: IndexMap<String, Array1<f64>>,
    pub seed: u64,
    pub mode: NormMode,
}

impl NetworkInstance {
    pub fn generator_spec(&self) -> Option<&GeneratorSpec> {
        match &self.spec {
            NetworkSpec::Generator(s) => Some(s),
            NetworkSpec::Discriminator(_) => None,
        }
    }

    pub fn discriminator_spec(&self) -> Option<&DiscriminatorSpec> {
        match &self.spec {
            NetworkSpec::Discriminator(s) => Some(s),
            NetworkSpec::Generator(_) => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
    }

    /// Rounds every parameter and buffer to the nearest single-precision value.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.mapv_inplace(|v| v as f32 as f64);
        }
        for b in self.buffers.values_mut() {
            b.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    /// Sets the affine map applied to raw generator output by [`generate`].
    pub fn set_output_affine(&mut self, scale: Array1<f64>, shift: Array1<f64>) -> Result<()> {
        let spec = self
            .generator_spec()
            .ok_or_else(|| crate::Error::Config("not a generator".into()))?;
        ensure!(
            scale.len() == spec.d && shift.len() == spec.d,
            Shape,
            "affine must have {} entries",
            spec.d
        );
        self.buffers
            .insert(init::OUT_SCALE.into(), scale.mapv(|v| v as f32 as f64));
        self.buffers
            .insert(init::OUT_SHIFT.into(), shift.mapv(|v| v as f32 as f64));
        Ok(())
    }

    pub fn output_affine(&self) -> (Array1<f64>, Array1<f64>) {
        (
            self.buffers[init::OUT_SCALE].clone(),
            self.buffers[init::OUT_SHIFT].clone(),
        )
    }
}

pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<NetworkInstance> {
    spec.validate()?;
    Ok(init::generator(spec, seed))
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<NetworkInstance> {
    spec.validate()?;
    Ok(init::discriminator(spec, seed))
}

/// Runs the generator on a `(batch, length, d_n)` noise array in the
/// instance's current mode and applies the output affine.
pub fn generate_batch(g: &NetworkInstance, noise: &Array3<f64>) -> Result<Array3<f64>> {
    let spec = g
        .generator_spec()
        .ok_or_else(|| crate::Error::Config("not a generator".into()))?;
    let (b, n, c) = noise.dim();
    ensure!(b >= 1, Shape, "empty noise batch");
    ensure!(
        c == spec.d_n,
        Shape,
        "noise has {c} channels, generator expects {}",
        spec.d_n
    );
    ensure!(
        n >= spec.f,
        TooShort,
        "noise length {n} shorter than receptive field {}",
        spec.f
    );
    ensure!(
        noise.iter().all(|v| v.is_finite()),
        NonFinite,
        "noise contains non-finite values"
    );
    ensure!(
        !(g.mode == NormMode::Train && spec.norm == crate::layers::NormKind::Batch && b < 2),
        Config,
        "train-mode batch norm needs at least 2 samples"
    );
    let mut graph = Graph::<f64>::new();
    let mut bind = forward::Binding::new(&mut graph, g, false);
    let z = graph.constant(noise.clone());
    let y = forward::generator(&mut graph, g, &mut bind, z);
    let (scale, shift) = g.output_affine();
    let mut out = graph.value(y).clone();
    for mut row in out.lanes_mut(Axis(2)) {
        row.zip_mut_with(&scale, |v, s| *v *= s);
        row += &shift;
    }
    Ok(out)
}

/// Maps noise of length `l' + f - 1` to a series of length `l'`.
pub fn generate(g: &NetworkInstance, noise: &TimeSeriesMatrix) -> Result<TimeSeriesMatrix> {
    let f = g.generator_spec().map(|s| s.f).unwrap_or(1);
    let out = generate_batch(g, &noise.to_batch())?;
    TimeSeriesMatrix::from_batch(&out, noise.time_offset() + f as i64 - 1)
}

fn prepare_discriminator_input(spec: &DiscriminatorSpec, sample: &Array3<f64>) -> Result<()> {
    let (b, n, c) = sample.dim();
    ensure!(b >= 1, Shape, "empty sample batch");
    ensure!(
        n == spec.l,
        Shape,
        "sample length {n} differs from discriminator length {}",
        spec.l
    );
    ensure!(
        c == spec.d || c == spec.input_width(),
        Shape,
        "sample has {c} channels, discriminator expects {} (or {} pre-augmented)",
        spec.d,
        spec.input_width()
    );
    ensure!(
        sample.iter().all(|v| v.is_finite()),
        NonFinite,
        "sample contains non-finite values"
    );
    Ok(())
}

/// Scores a `(batch, l, d)` array; one score per batch element.
pub fn discriminate_batch(d: &NetworkInstance, sample: &Array3<f64>) -> Result<Array1<f64>> {
    let spec = d
        .discriminator_spec()
        .ok_or_else(|| crate::Error::Config("not a discriminator".into()))?;
    prepare_discriminator_input(spec, sample)?;
    ensure!(
        !(d.mode == NormMode::Train
            && spec.norm == crate::layers::NormKind::Batch
            && sample.dim().0 < 2),
        Config,
        "train-mode batch norm needs at least 2 samples"
    );
    let mut graph = Graph::<f64>::new();
    let mut bind = forward::Binding::new(&mut graph, d, false);
    let x = graph.constant(sample.clone());
    let s = forward::discriminator(&mut graph, d, &mut bind, x);
    Ok(graph.value(s).iter().copied().collect())
}

pub fn discriminate(d: &NetworkInstance, sample: &TimeSeriesMatrix) -> Result<f64> {
    Ok(discriminate_batch(d, &sample.to_batch())?[0])
}

/// Appends the running sum of a single return column.
pub fn augment_cumsum(returns: &TimeSeriesMatrix) -> Result<TimeSeriesMatrix> {
    ensure!(
        returns.channels() == 1,
        Shape,
        "cumsum augmentation expects one channel, got {}",
        returns.channels()
    );
    let x = returns.values();
    let mut out = Array2::zeros((x.nrows(), 2));
    let mut acc = 0.0;
    for (t, &v) in x.column(0).iter().enumerate() {
        acc += v;
        out[[t, 0]] = v;
        out[[t, 1]] = acc;
    }
    TimeSeriesMatrix::with_offset(out, returns.time_offset())
}

/// Appends per-channel first differences; the first row of the new block is zero.
pub fn augment_logvol_returns(surface: &TimeSeriesMatrix) -> Result<TimeSeriesMatrix> {
    let x = surface.values();
    let (l, d) = x.dim();
    let mut out = Array2::zeros((l, 2 * d));
    out.slice_mut(ndarray::s![.., ..d]).assign(x);
    for t in 1..l {
        for j in 0..d {
            out[[t, d + j]] = x[[t, j]] - x[[t - 1, j]];
        }
    }
    TimeSeriesMatrix::with_offset(out, surface.time_offset())
}
