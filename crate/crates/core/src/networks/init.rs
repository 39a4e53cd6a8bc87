use indexmap::IndexMap;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DiscriminatorSpec, Family, GeneratorSpec, NetworkInstance, NetworkSpec};
use crate::layers::{NormKind, NormMode};

pub(crate) const OUT_SCALE: &str = "out.scale";
pub(crate) const OUT_SHIFT: &str = "out.shift";
pub(crate) const SN_SUFFIX: &str = ".sn_u";
pub(crate) const RUNNING_MEAN: &str = ".running_mean";
pub(crate) const RUNNING_VAR: &str = ".running_var";

struct Builder {
    rng: ChaCha8Rng,
    params: IndexMap<String, Array3<f64>>,
    buffers: IndexMap<String, Array1<f64>>,
    spectral: bool,
    norm: NormKind,
}

impl Builder {
    fn new(seed: u64, spectral: bool, norm: NormKind) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            spectral,
            norm,
        }
    }

    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..=bound))
    }

    fn orthogonal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let (big, small) = (rows.max(cols), rows.min(cols));
        let g = DMatrix::<f64>::from_fn(big, small, |_, _| self.rng.sample(StandardNormal));
        let qr = g.qr();
        let q = qr.q();
        let r = qr.r();
        let basis = Array2::from_shape_fn((big, small), |(i, j)| q[(i, j)] * r[(j, j)].signum());
        if rows >= cols {
            basis
        } else {
            basis.reversed_axes()
        }
    }

    fn unit_vector(&mut self, n: usize) -> Array1<f64> {
        let v: Array1<f64> = Array1::from_shape_fn(n, |_| self.rng.sample(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v / norm
        } else {
            let mut e = Array1::zeros(n);
            e[0] = 1.0;
            e
        }
    }

    fn matrix(&mut self, name: String, w: Array2<f64>) {
        if self.spectral {
            let u = self.unit_vector(w.nrows());
            self.buffers.insert(format!("{name}{SN_SUFFIX}"), u);
        }
        self.params.insert(name, w.insert_axis(ndarray::Axis(0)));
    }

    fn row(&mut self, name: String, v: Array1<f64>) {
        let n = v.len();
        self.params
            .insert(name, v.into_shape_with_order((1, 1, n)).expect("vector"));
    }

    fn conv(&mut self, prefix: &str, kernel: usize, n_in: usize, n_out: usize) {
        let bound = 1.0 / ((kernel * n_in) as f64).sqrt();
        let w = self.uniform(kernel * n_in, n_out, bound);
        self.matrix(format!("{prefix}.w"), w);
        let b = self.uniform(1, n_out, bound).into_shape_with_order(n_out).expect("row");
        self.row(format!("{prefix}.b"), b);
    }

    fn attention(&mut self, prefix: &str, n_i: usize, n_a: usize) {
        for name in ["wq", "wk", "wv"] {
            let w = self.orthogonal(n_i, n_a);
            self.matrix(format!("{prefix}.{name}"), w);
        }
        let wo = self.orthogonal(n_a, n_i);
        self.matrix(format!("{prefix}.wo"), wo);
        for name in ["bq", "bk", "bv"] {
            self.row(format!("{prefix}.{name}"), Array1::zeros(n_a));
        }
        self.row(format!("{prefix}.bo"), Array1::zeros(n_i));
    }

    fn mlp(&mut self, prefix: &str, n_i: usize, n_m: usize) {
        for (w, b, fan_in, fan_out) in [("w1", "b1", n_i, n_m), ("w2", "b2", n_m, n_i)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = self.uniform(fan_in, fan_out, bound);
            self.matrix(format!("{prefix}.{w}"), weight);
            let bias = self.uniform(1, fan_out, bound).into_shape_with_order(fan_out).expect("row");
            self.row(format!("{prefix}.{b}"), bias);
        }
    }

    fn norm(&mut self, prefix: &str, channels: usize) {
        self.row(format!("{prefix}.gamma"), Array1::ones(channels));
        self.row(format!("{prefix}.beta"), Array1::zeros(channels));
        if self.norm == NormKind::Batch {
            self.buffers
                .insert(format!("{prefix}{RUNNING_MEAN}"), Array1::zeros(channels));
            self.buffers
                .insert(format!("{prefix}{RUNNING_VAR}"), Array1::ones(channels));
        }
    }

    fn finish(self, spec: NetworkSpec, seed: u64) -> NetworkInstance {
        let mut inst = NetworkInstance {
            spec,
            params: self.params,
            buffers: self.buffers,
            seed,
            mode: NormMode::Eval,
        };
        inst.round_to_f32();
        inst
    }
}

pub(crate) fn generator(spec: &GeneratorSpec, seed: u64) -> NetworkInstance {
    let mut b = Builder::new(seed, spec.spectral_norm, spec.norm);
    let d_h = spec.d_h;
    b.conv("in", 1, spec.d_n, d_h);
    match spec.family {
        Family::Ttgan => {
            for j in 0..spec.layers {
                b.norm(&format!("b{j}.n1"), d_h);
                b.attention(&format!("b{j}.attn"), d_h, spec.n_a);
                b.norm(&format!("b{j}.n2"), d_h);
                b.mlp(&format!("b{j}.mlp"), d_h, spec.n_m);
            }
            for j in 0..spec.layers.saturating_sub(1) {
                b.conv(&format!("skip{j}"), 1, d_h, d_h);
            }
        }
        Family::Tagan => {
            let blocks = spec.l1 + spec.l2;
            for j in 0..blocks {
                b.norm(&format!("c{j}.n1"), d_h);
                b.conv(&format!("c{j}.conv1"), spec.n_k, d_h, d_h);
                b.norm(&format!("c{j}.n2"), d_h);
                b.conv(&format!("c{j}.conv2"), spec.n_k, d_h, d_h);
            }
            b.norm("a.n", d_h);
            b.attention("a.attn", d_h, spec.n_a);
            for j in 0..blocks {
                b.conv(&format!("skip{j}"), 1, d_h, d_h);
            }
            b.norm("out.n", d_h);
        }
    }
    b.conv("out", 1, d_h, spec.d);
    b.buffers.insert(OUT_SCALE.into(), Array1::ones(spec.d));
    b.buffers.insert(OUT_SHIFT.into(), Array1::zeros(spec.d));
    b.finish(NetworkSpec::Generator(spec.clone()), seed)
}

pub(crate) fn discriminator(spec: &DiscriminatorSpec, seed: u64) -> NetworkInstance {
    let mut b = Builder::new(seed, spec.spectral_norm, spec.norm);
    let width = spec.input_width();
    match spec.family {
        Family::Tagan => {
            let mut c_in = width;
            if spec.l1 == 0 {
                attention_at(&mut b, spec, c_in);
            }
            for j in 1..=spec.l1 + spec.l2 {
                let c = spec.channels_at(j);
                if j > 1 {
                    b.norm(&format!("d{j}.n1"), c_in);
                }
                b.conv(&format!("d{j}.z1"), spec.n_k, c_in, c);
                b.norm(&format!("d{j}.n2"), c);
                b.conv(&format!("d{j}.z2"), spec.n_k, c, c);
                c_in = c;
                if j == spec.l1 {
                    attention_at(&mut b, spec, c_in);
                }
            }
            let w = b.uniform(c_in, 1, 1.0 / (c_in as f64).sqrt());
            b.matrix("head.w".into(), w);
        }
        Family::Ttgan => {
            b.conv("in", 1, width, spec.d_h);
            for j in 0..spec.layers {
                b.norm(&format!("b{j}.n1"), spec.d_h);
                b.attention(&format!("b{j}.attn"), spec.d_h, spec.n_a);
                b.norm(&format!("b{j}.n2"), spec.d_h);
                b.mlp(&format!("b{j}.mlp"), spec.d_h, spec.n_m);
            }
            let w = b.uniform(spec.l, spec.n_h, 1.0 / ((spec.l * spec.n_h) as f64).sqrt());
            b.matrix("head.w".into(), w);
        }
    }
    b.finish(NetworkSpec::Discriminator(spec.clone()), seed)
}

fn attention_at(b: &mut Builder, spec: &DiscriminatorSpec, channels: usize) {
    b.norm("a.n", channels);
    b.attention("a.attn", channels, spec.n_a);
}
