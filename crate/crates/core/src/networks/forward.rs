//! Forward passes on a tape.
//!
//! [`Binding`] places an instance's parameters on a [`Graph`], either as
//! differentiable leaves or as constants, and collects buffer updates
//! (running statistics, power-iteration vectors) produced in train mode.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{Array1, Array3};

use super::init::{RUNNING_MEAN, RUNNING_VAR, SN_SUFFIX};
use super::{Augment, DiscriminatorSpec, Family, GeneratorSpec, NetworkInstance};
use crate::autodiff::{Graph, Real, Var};
use crate::layers::{
    attention_graph, batch_norm_eval_graph, batch_norm_train_graph, conv_causal_graph,
    conv_regular_graph, layer_norm_graph, mlp_graph, spectral_normalize_graph, Activation,
    AttentionMask, AttentionVars, ConvVars, MlpVars, NormKind, NormMode, DEFAULT_NEG_LARGE,
};

pub struct Binding {
    vars: IndexMap<String, Var>,
    effective: HashMap<String, Var>,
    updates: IndexMap<String, Array1<f64>>,
}

impl Binding {
    /// Places every parameter of `inst` on `g`. With `track` the parameters
    /// are leaves that gradients can be taken with respect to.
    pub fn new<F: Real>(g: &mut Graph<F>, inst: &NetworkInstance, track: bool) -> Self {
        let vars = inst
            .params
            .iter()
            .map(|(name, value)| {
                let v = value.mapv(F::lit);
                (name.clone(), if track { g.param(v) } else { g.constant(v) })
            })
            .collect();
        Self {
            vars,
            effective: HashMap::new(),
            updates: IndexMap::new(),
        }
    }

    /// Parameter handles in store order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    /// Buffer values computed during a train-mode pass.
    pub fn updates(&self) -> &IndexMap<String, Array1<f64>> {
        &self.updates
    }

    pub fn into_updates(self) -> IndexMap<String, Array1<f64>> {
        self.updates
    }

    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

struct Ctx<'a, F: Real> {
    g: &'a mut Graph<F>,
    inst: &'a NetworkInstance,
    b: &'a mut Binding,
    norm: NormKind,
}

impl<F: Real> Ctx<'_, F> {
    fn train(&self) -> bool {
        self.inst.mode == NormMode::Train
    }

    fn weight(&mut self, name: &str) -> Var {
        if let Some(&v) = self.b.effective.get(name) {
            return v;
        }
        let raw = self.b.var(name);
        let v = match self.inst.buffers.get(&format!("{name}{SN_SUFFIX}")) {
            Some(u) => {
                let (w, u_new) = spectral_normalize_graph(self.g, raw, u);
                if self.train() {
                    self.b.updates.insert(format!("{name}{SN_SUFFIX}"), u_new);
                }
                w
            }
            None => raw,
        };
        self.b.effective.insert(name.to_string(), v);
        v
    }

    fn conv_vars(&mut self, prefix: &str, kernel: usize) -> ConvVars {
        ConvVars {
            weight: self.weight(&format!("{prefix}.w")),
            bias: self.b.var(&format!("{prefix}.b")),
            kernel,
        }
    }

    fn causal(&mut self, prefix: &str, kernel: usize, x: Var) -> Var {
        let p = self.conv_vars(prefix, kernel);
        conv_causal_graph(self.g, x, &p)
    }

    fn regular(&mut self, prefix: &str, kernel: usize, stride: usize, x: Var) -> Var {
        let p = self.conv_vars(prefix, kernel);
        conv_regular_graph(self.g, x, &p, stride)
    }

    fn attention(&mut self, prefix: &str, n_heads: usize, mask: AttentionMask, x: Var) -> Var {
        let p = AttentionVars {
            wq: self.weight(&format!("{prefix}.wq")),
            wk: self.weight(&format!("{prefix}.wk")),
            wv: self.weight(&format!("{prefix}.wv")),
            wo: self.weight(&format!("{prefix}.wo")),
            bq: self.b.var(&format!("{prefix}.bq")),
            bk: self.b.var(&format!("{prefix}.bk")),
            bv: self.b.var(&format!("{prefix}.bv")),
            bo: self.b.var(&format!("{prefix}.bo")),
        };
        attention_graph(self.g, x, &p, n_heads, mask)
    }

    fn mlp(&mut self, prefix: &str, activation: Activation, x: Var) -> Var {
        let p = MlpVars {
            w1: self.weight(&format!("{prefix}.w1")),
            b1: self.b.var(&format!("{prefix}.b1")),
            w2: self.weight(&format!("{prefix}.w2")),
            b2: self.b.var(&format!("{prefix}.b2")),
        };
        mlp_graph(self.g, x, &p, activation)
    }

    fn norm(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.b.var(&format!("{prefix}.gamma"));
        let beta = self.b.var(&format!("{prefix}.beta"));
        match self.norm {
            NormKind::Layer | NormKind::Spectral => layer_norm_graph(self.g, x, gamma, beta),
            NormKind::Batch => {
                let mean_key = format!("{prefix}{RUNNING_MEAN}");
                let var_key = format!("{prefix}{RUNNING_VAR}");
                let rm = &self.inst.buffers[&mean_key];
                let rv = &self.inst.buffers[&var_key];
                if self.train() {
                    let [b, t, _] = self.g.shape(x);
                    let (y, mean, var) = batch_norm_train_graph(self.g, x, gamma, beta);
                    let n = (b * t) as f64;
                    let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var };
                    let m = 0.1;
                    self.b.updates.insert(mean_key, rm * (1.0 - m) + &mean * m);
                    self.b
                        .updates
                        .insert(var_key, rv * (1.0 - m) + &unbiased * m);
                    y
                } else {
                    batch_norm_eval_graph(self.g, x, gamma, beta, rm, rv)
                }
            }
        }
    }

    fn crop(&mut self, x: Var, len: usize) -> Var {
        let n = self.g.shape(x)[1];
        if n == len {
            x
        } else {
            self.g.slice(x, 1, n - len, len)
        }
    }
}

fn accumulate<F: Real>(g: &mut Graph<F>, acc: Option<Var>, y: Var) -> Var {
    match acc {
        Some(a) => g.add(a, y),
        None => y,
    }
}

/// Raw generator output for noise `z` of shape `(batch, n, d_n)`, `n >= f`.
/// The output affine is not applied.
pub fn generator<F: Real>(
    g: &mut Graph<F>,
    inst: &NetworkInstance,
    b: &mut Binding,
    z: Var,
) -> Var {
    let spec = inst.generator_spec().expect("generator instance").clone();
    let mut cx = Ctx {
        g,
        inst,
        b,
        norm: spec.norm,
    };
    let n = cx.g.shape(z)[1];
    assert!(n >= spec.f, "noise shorter than receptive field");
    let out_len = n + 1 - spec.f;
    let h = cx.causal("in", 1, z);
    let acc = match spec.family {
        Family::Ttgan => ttgan_generator_body(&mut cx, &spec, h, out_len),
        Family::Tagan => tagan_generator_body(&mut cx, &spec, h, out_len),
    };
    cx.causal("out", 1, acc)
}

fn ttgan_generator_body<F: Real>(
    cx: &mut Ctx<'_, F>,
    spec: &GeneratorSpec,
    mut h: Var,
    out_len: usize,
) -> Var {
    let mut acc = None;
    for (j, &rfs) in spec.per_layer_rfs.iter().enumerate() {
        let normed = cx.norm(&format!("b{j}.n1"), h);
        let a = cx.attention(
            &format!("b{j}.attn"),
            spec.n_h,
            AttentionMask::Causal {
                rfs,
                neg_large: DEFAULT_NEG_LARGE,
            },
            normed,
        );
        let keep = cx.g.shape(a)[1];
        let res = cx.crop(h, keep);
        let h1 = cx.g.add(res, a);
        let normed = cx.norm(&format!("b{j}.n2"), h1);
        let m = cx.mlp(&format!("b{j}.mlp"), spec.activation, normed);
        h = cx.g.add(h1, m);
        if j + 1 < spec.layers {
            let tail = cx.crop(h, out_len);
            let s = cx.causal(&format!("skip{j}"), 1, tail);
            acc = Some(accumulate(cx.g, acc, s));
        }
    }
    accumulate(cx.g, acc, h)
}

fn tagan_generator_body<F: Real>(
    cx: &mut Ctx<'_, F>,
    spec: &GeneratorSpec,
    mut h: Var,
    out_len: usize,
) -> Var {
    let act = spec.activation;
    let attn_rfs = spec.tagan_attention_rfs() as usize;
    let blocks = spec.l1 + spec.l2;
    let mut acc = None;
    let mut outputs = Vec::with_capacity(blocks + 1);
    for j in 0..blocks {
        if j == spec.l1 {
            let normed = cx.norm("a.n", h);
            let a = cx.attention(
                "a.attn",
                spec.n_h,
                AttentionMask::Causal {
                    rfs: attn_rfs,
                    neg_large: DEFAULT_NEG_LARGE,
                },
                normed,
            );
            let keep = cx.g.shape(a)[1];
            let res = cx.crop(h, keep);
            h = cx.g.add(res, a);
            outputs.push(h);
        }
        let u = cx.norm(&format!("c{j}.n1"), h);
        let u = act.apply(cx.g, u);
        let u = cx.causal(&format!("c{j}.conv1"), spec.n_k, u);
        let u = cx.norm(&format!("c{j}.n2"), u);
        let u = act.apply(cx.g, u);
        let u = cx.causal(&format!("c{j}.conv2"), spec.n_k, u);
        let keep = cx.g.shape(u)[1];
        let res = cx.crop(h, keep);
        h = cx.g.add(res, u);
        outputs.push(h);
    }
    if blocks == spec.l1 {
        let normed = cx.norm("a.n", h);
        let a = cx.attention(
            "a.attn",
            spec.n_h,
            AttentionMask::Causal {
                rfs: attn_rfs,
                neg_large: DEFAULT_NEG_LARGE,
            },
            normed,
        );
        let keep = cx.g.shape(a)[1];
        let res = cx.crop(h, keep);
        h = cx.g.add(res, a);
        outputs.push(h);
    }
    for (j, &o) in outputs[..outputs.len() - 1].iter().enumerate() {
        let tail = cx.crop(o, out_len);
        let s = cx.causal(&format!("skip{j}"), 1, tail);
        acc = Some(accumulate(cx.g, acc, s));
    }
    let acc = accumulate(cx.g, acc, h);
    let acc = cx.norm("out.n", acc);
    act.apply(cx.g, acc)
}

fn augment<F: Real>(g: &mut Graph<F>, mode: Augment, x: Var) -> Var {
    let [_, l, _] = g.shape(x);
    let op = match mode {
        Augment::None => return x,
        Augment::Cumsum => {
            Array3::from_shape_fn(
                (1, l, l),
                |(_, t, s)| if s <= t { F::one() } else { F::zero() },
            )
        }
        Augment::Returns => Array3::from_shape_fn((1, l, l), |(_, t, s)| {
            if t == 0 {
                F::zero()
            } else if s == t {
                F::one()
            } else if s + 1 == t {
                -F::one()
            } else {
                F::zero()
            }
        }),
    };
    let op = g.constant(op);
    let extra = g.matmul(op, x);
    g.concat(&[x, extra], 2)
}

/// Discriminator scores, shape `(batch, 1, 1)`. Inputs with `d` channels are
/// augmented on the tape; inputs that already have the augmented width are used as is.
pub fn discriminator<F: Real>(
    g: &mut Graph<F>,
    inst: &NetworkInstance,
    b: &mut Binding,
    y: Var,
) -> Var {
    let spec = inst
        .discriminator_spec()
        .expect("discriminator instance")
        .clone();
    let x = if g.shape(y)[2] == spec.d {
        augment(g, spec.augment, y)
    } else {
        y
    };
    let mut cx = Ctx {
        g,
        inst,
        b,
        norm: spec.norm,
    };
    let u = match spec.family {
        Family::Tagan => tagan_discriminator_body(&mut cx, &spec, x),
        Family::Ttgan => ttgan_discriminator_body(&mut cx, &spec, x),
    };
    let batch = cx.g.shape(u)[0];
    cx.g.sum_to(u, [batch, 1, 1])
}

fn tagan_discriminator_body<F: Real>(
    cx: &mut Ctx<'_, F>,
    spec: &DiscriminatorSpec,
    mut u: Var,
) -> Var {
    let act = spec.activation;
    let attention = |cx: &mut Ctx<'_, F>, u: Var| {
        let normed = cx.norm("a.n", u);
        let a = cx.attention("a.attn", spec.n_h, AttentionMask::None, normed);
        cx.g.add(u, a)
    };
    if spec.l1 == 0 {
        u = attention(cx, u);
    }
    for j in 1..=spec.l1 + spec.l2 {
        let v = if j > 1 {
            cx.norm(&format!("d{j}.n1"), u)
        } else {
            u
        };
        let v = act.apply(cx.g, v);
        let v = cx.regular(&format!("d{j}.z1"), spec.n_k, 1, v);
        let v = cx.norm(&format!("d{j}.n2"), v);
        let v = act.apply(cx.g, v);
        u = cx.regular(&format!("d{j}.z2"), spec.n_k, 2, v);
        if j == spec.l1 {
            u = attention(cx, u);
        }
    }
    let w = cx.weight("head.w");
    let hu = act.apply(cx.g, u);
    cx.g.matmul(hu, w)
}

fn ttgan_discriminator_body<F: Real>(cx: &mut Ctx<'_, F>, spec: &DiscriminatorSpec, x: Var) -> Var {
    let mut u = cx.regular("in", 1, 1, x);
    for j in 0..spec.layers {
        let normed = cx.norm(&format!("b{j}.n1"), u);
        let a = cx.attention(
            &format!("b{j}.attn"),
            spec.n_h,
            AttentionMask::Sparse {
                neg_large: DEFAULT_NEG_LARGE,
            },
            normed,
        );
        u = cx.g.add(u, a);
        let normed = cx.norm(&format!("b{j}.n2"), u);
        let m = cx.mlp(&format!("b{j}.mlp"), spec.activation, normed);
        u = cx.g.add(u, m);
    }
    let lead = cx.g.slice(u, 2, 0, spec.n_h);
    let w = cx.weight("head.w");
    cx.g.mul(lead, w)
}
