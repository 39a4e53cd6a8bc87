//! Reference implementations and check drivers shared by the integration tests
//! and the acceptance report.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tsgan::autodiff::{Graph, Var};
use tsgan::layers::*;
use tsgan::networks::forward::{self, Binding};
use tsgan::networks::*;
use tsgan::TimeSeriesMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

pub fn normal1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

pub fn normal3(rng: &mut ChaCha8Rng, a: usize, b: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((a, b, c), |_| rng.sample(StandardNormal))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "oracle shape mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- oracles

pub fn conv_regular_naive(x: &Array2<f64>, p: &ConvParams) -> Array2<f64> {
    let (n_l, n_i) = x.dim();
    let (n_k, _, n_o) = p.weight.dim();
    let s = p.stride;
    let n_out = n_l / s;
    let mut out = Array2::zeros((n_out, n_o));
    // 1-based: tap index s(i_l - 1) + 1 - (n_k + 1)/2 + i_k, clamped
    for il in 1..=n_out {
        for o in 0..n_o {
            let mut acc = p.bias[o];
            for ik in 1..=n_k {
                let src = (s * (il - 1) + 1 + ik) as i64 - n_k.div_ceil(2) as i64;
                let src = src.clamp(1, n_l as i64) as usize;
                for i in 0..n_i {
                    acc += x[[src - 1, i]] * p.weight[[ik - 1, i, o]];
                }
            }
            out[[il - 1, o]] = acc;
        }
    }
    out
}

pub fn conv_causal_naive(x: &Array2<f64>, p: &ConvParams) -> Array2<f64> {
    let (n_l, n_i) = x.dim();
    let (n_k, _, n_o) = p.weight.dim();
    let mut out = Array2::zeros((n_l - n_k + 1, n_o));
    for t in 0..n_l - n_k + 1 {
        for o in 0..n_o {
            let mut acc = p.bias[o];
            for k in 0..n_k {
                for i in 0..n_i {
                    acc += x[[t + k, i]] * p.weight[[k, i, o]];
                }
            }
            out[[t, o]] = acc;
        }
    }
    out
}

fn affine_naive(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let m = w.ncols();
    let mut out = Array2::zeros((n, m));
    for r in 0..n {
        for c in 0..m {
            let mut acc = b[c];
            for j in 0..k {
                acc += x[[r, j]] * w[[j, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Allowed-position predicate (1-based `i`, `j`) for head `h`.
pub fn sparse_allowed(n_l: usize, h: usize, i: usize, j: usize) -> bool {
    let mut s = 1;
    while (s + 1) * (s + 1) <= n_l {
        s += 1;
    }
    match h % 4 {
        0 => (i - 1) / s == (j - 1) / s && i >= j,
        1 => (i - 1) / s == (j - 1) / s && i <= j,
        2 => j.is_multiple_of(s) || i == j,
        _ => j % s == 1 || i == j,
    }
}

pub fn attention_naive(x: &Array2<f64>, p: &AttentionParams) -> Array2<f64> {
    let n_l = x.nrows();
    let n_a = p.wq.ncols();
    let hw = n_a / p.n_heads;
    let q = affine_naive(x, &p.wq, &p.bq);
    let k = affine_naive(x, &p.wk, &p.bk);
    let v = affine_naive(x, &p.wv, &p.bv);
    let (first, rfs) = match p.kind {
        AttentionKind::Causal { rfs } => (rfs - 1, rfs),
        _ => (0, 0),
    };
    let mut a = Array2::zeros((n_l - first, n_a));
    for h in 0..p.n_heads {
        for i in first..n_l {
            let mut logits = vec![0.0; n_l];
            for (j, lg) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in h * hw..(h + 1) * hw {
                    dot += q[[i, c]] * k[[j, c]];
                }
                let allowed = match p.kind {
                    AttentionKind::Regular => true,
                    AttentionKind::Sparse => sparse_allowed(n_l, h, i + 1, j + 1),
                    AttentionKind::Causal { .. } => j <= i && i - j < rfs,
                };
                *lg = dot + if allowed { 0.0 } else { -p.neg_large };
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in h * hw..(h + 1) * hw {
                let mut acc = 0.0;
                for j in 0..n_l {
                    acc += e[j] / total * v[[j, c]];
                }
                a[[i - first, c]] = acc;
            }
        }
    }
    affine_naive(&a, &p.wo, &p.bo)
}

pub fn mlp_naive(x: &Array2<f64>, p: &MlpParams) -> Array2<f64> {
    let h = affine_naive(x, &p.w1, &p.b1).mapv(|v| p.activation.eval(v));
    affine_naive(&h, &p.w2, &p.b2)
}

// ------------------------------------------------------- random instances

pub fn random_conv(rng: &mut ChaCha8Rng, kind: ConvKind) -> (Array2<f64>, ConvParams) {
    let n_i = rng.random_range(1..=8);
    let n_o = rng.random_range(1..=8);
    let (n_k, stride) = match kind {
        ConvKind::Regular => (2 * rng.random_range(0..=3) + 1, rng.random_range(1..=3)),
        ConvKind::Causal => (rng.random_range(1..=6), 1),
    };
    let n_l = rng.random_range(n_k.max(stride)..=32);
    let x = normal2(rng, n_l, n_i);
    let p = ConvParams {
        weight: normal3(rng, n_k, n_i, n_o),
        bias: normal1(rng, n_o),
        stride,
        kind,
    };
    (x, p)
}

pub fn random_attention(rng: &mut ChaCha8Rng, which: u8) -> (Array2<f64>, AttentionParams) {
    let n_i = rng.random_range(1..=8);
    let n_h = if which == 1 { 4 * rng.random_range(1..=2) } else { rng.random_range(1..=4) };
    let n_a = n_h * rng.random_range(1..=2);
    let n_l = rng.random_range(1..=32);
    let kind = match which {
        0 => AttentionKind::Regular,
        1 => AttentionKind::Sparse,
        _ => AttentionKind::Causal { rfs: rng.random_range(1..=n_l) },
    };
    let x = normal2(rng, n_l, n_i);
    let p = AttentionParams {
        wq: normal2(rng, n_i, n_a) * 0.5,
        wk: normal2(rng, n_i, n_a) * 0.5,
        wv: normal2(rng, n_i, n_a),
        wo: normal2(rng, n_a, n_i),
        bq: normal1(rng, n_a),
        bk: normal1(rng, n_a),
        bv: normal1(rng, n_a),
        bo: normal1(rng, n_i),
        n_heads: n_h,
        kind,
        neg_large: DEFAULT_NEG_LARGE,
    };
    (x, p)
}

pub fn random_mlp(rng: &mut ChaCha8Rng) -> (Array2<f64>, MlpParams) {
    let n_i = rng.random_range(1..=8);
    let n_m = rng.random_range(1..=8);
    let n_l = rng.random_range(1..=32);
    let activation = match rng.random_range(0..4) {
        0 => Activation::Identity,
        1 => Activation::leaky(),
        2 => Activation::Tanh,
        _ => Activation::Gelu,
    };
    let p = MlpParams {
        w1: normal2(rng, n_i, n_m),
        b1: normal1(rng, n_m),
        w2: normal2(rng, n_m, n_i),
        b2: normal1(rng, n_i),
        activation,
    };
    (normal2(rng, n_l, n_i), p)
}

pub const LAYER_NAMES: [&str; 6] = [
    "conv_regular",
    "conv_causal",
    "attention_regular",
    "attention_sparse",
    "attention_causal",
    "mlp_block",
];

/// Worst absolute deviation from the index-loop oracle per layer type.
pub fn layer_oracle_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..instances {
        let (x, p) = random_conv(&mut rng, ConvKind::Regular);
        let y = conv_regular(&TimeSeriesMatrix::new(x.clone()).unwrap(), &p).unwrap();
        worst[0] = worst[0].max(max_abs_diff(y.values(), &conv_regular_naive(&x, &p)));

        let (x, p) = random_conv(&mut rng, ConvKind::Causal);
        let y = conv_causal(&TimeSeriesMatrix::new(x.clone()).unwrap(), &p).unwrap();
        worst[1] = worst[1].max(max_abs_diff(y.values(), &conv_causal_naive(&x, &p)));

        for which in 0..3u8 {
            let (x, p) = random_attention(&mut rng, which);
            let input = TimeSeriesMatrix::new(x.clone()).unwrap();
            let y = match which {
                0 => attention_regular(&input, &p),
                1 => attention_sparse(&input, &p),
                _ => attention_causal(&input, &p),
            }
            .unwrap();
            let e = max_abs_diff(y.values(), &attention_naive(&x, &p));
            worst[2 + which as usize] = worst[2 + which as usize].max(e);
        }

        let (x, p) = random_mlp(&mut rng);
        let y = mlp_block(&TimeSeriesMatrix::new(x.clone()).unwrap(), &p).unwrap();
        worst[5] = worst[5].max(max_abs_diff(y.values(), &mlp_naive(&x, &p)));
    }
    LAYER_NAMES.iter().copied().zip(worst).collect()
}

/// Number of entries where the generated masks disagree with the set definitions.
pub fn sparse_mask_mismatches(n_l: usize) -> usize {
    let masks = build_sparse_masks(n_l);
    let mut bad = 0;
    for (h, m) in masks.iter().enumerate() {
        for i in 1..=n_l {
            for j in 1..=n_l {
                if m[[i - 1, j - 1]] != sparse_allowed(n_l, h, i, j) {
                    bad += 1;
                }
            }
        }
    }
    bad
}

// --------------------------------------------------- finite differences

const FD_STEP: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|, floor)` between two gradient
/// vectors. The floor keeps leaves whose true gradient vanishes (a key bias under
/// softmax shift invariance, say) from turning rounding noise into unit error.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor).max(f64::MIN_POSITIVE)
}

/// Floor used for one gradient check: a millionth of the full gradient norm.
fn floor_of(grads: &[Vec<f64>]) -> f64 {
    1e-6 * grads.iter().map(|g| norm(g).powi(2)).sum::<f64>().sqrt()
}

/// Compares tape gradients of `build` (a scalar function of the given leaves)
/// against central differences, returning the worst relative error over leaves.
pub fn check_leaves<B>(leaves: &[Array3<f64>], build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Array3<f64>]| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let out = build(&mut g, &vars);
        g.item(out)
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|v| g.param(v.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.grad(out, &vars, false);
    let analytic: Vec<Vec<f64>> = grads.iter().map(|&v| g.value(v).iter().copied().collect()).collect();
    let floor = floor_of(&analytic);
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let mut numeric = Vec::with_capacity(leaf.len());
        for idx in 0..leaf.len() {
            let mut vals = leaves.to_vec();
            let slot = vals[li].as_slice_mut().expect("standard layout");
            let base = slot[idx];
            slot[idx] = base + FD_STEP;
            let up = eval(&vals);
            vals[li].as_slice_mut().unwrap()[idx] = base - FD_STEP;
            let down = eval(&vals);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic[li], &numeric, floor));
    }
    worst
}

/// Random fixed weights turning an array-valued output into a scalar.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let [a, b, c] = g.shape(y);
    let mut r = rng(seed);
    let w = g.constant(normal3(&mut r, a, b, c));
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn row(v: Array1<f64>) -> Array3<f64> {
    let n = v.len();
    v.into_shape_with_order((1, 1, n)).unwrap()
}

fn mat(m: Array2<f64>) -> Array3<f64> {
    m.insert_axis(ndarray::Axis(0))
}

/// Worst relative FD error for every layer primitive, including the normalizations.
pub fn layer_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    for (name, stride, kernel) in [("conv_regular", 1, 3), ("conv_regular_s2", 2, 3), ("conv_causal", 1, 3)] {
        let x = normal3(&mut r, 2, 9, 3);
        let w = normal3(&mut r, 1, kernel * 3, 4);
        let b = normal3(&mut r, 1, 1, 4);
        let causal = name == "conv_causal";
        let e = check_leaves(&[x, w, b], |g, v| {
            let p = ConvVars { weight: v[1], bias: v[2], kernel };
            let y = if causal { conv_causal_graph(g, v[0], &p) } else { conv_regular_graph(g, v[0], &p, stride) };
            weighted_sum(g, y, 1)
        });
        out.push((name.to_string(), e));
    }

    let masks = [
        ("attention_regular", AttentionMask::None, 2),
        ("attention_sparse", AttentionMask::Sparse { neg_large: DEFAULT_NEG_LARGE }, 4),
        ("attention_causal", AttentionMask::Causal { rfs: 4, neg_large: DEFAULT_NEG_LARGE }, 2),
    ];
    for (name, mask, heads) in masks {
        let (n_i, n_a, n_l) = (3, 8, 9);
        let mut leaves = vec![normal3(&mut r, 2, n_l, n_i)];
        for _ in 0..3 {
            leaves.push(mat(normal2(&mut r, n_i, n_a) * 0.5));
        }
        leaves.push(mat(normal2(&mut r, n_a, n_i)));
        for _ in 0..3 {
            leaves.push(row(normal1(&mut r, n_a) * 0.5));
        }
        leaves.push(row(normal1(&mut r, n_i)));
        let e = check_leaves(&leaves, |g, v| {
            let p = AttentionVars {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
                bq: v[5],
                bk: v[6],
                bv: v[7],
                bo: v[8],
            };
            let y = attention_graph(g, v[0], &p, heads, mask);
            weighted_sum(g, y, 2)
        });
        out.push((name.to_string(), e));
    }

    for act in [Activation::Gelu, Activation::Tanh, Activation::leaky()] {
        let leaves = vec![
            normal3(&mut r, 2, 7, 3),
            mat(normal2(&mut r, 3, 5)),
            row(normal1(&mut r, 5)),
            mat(normal2(&mut r, 5, 3)),
            row(normal1(&mut r, 3)),
        ];
        let e = check_leaves(&leaves, |g, v| {
            let p = MlpVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
            let y = mlp_graph(g, v[0], &p, act);
            weighted_sum(g, y, 3)
        });
        out.push((format!("mlp_block_{act:?}"), e));
    }

    let leaves = vec![normal3(&mut r, 3, 5, 4), row(normal1(&mut r, 4)), row(normal1(&mut r, 4))];
    let e = check_leaves(&leaves, |g, v| {
        let (y, _, _) = batch_norm_train_graph(g, v[0], v[1], v[2]);
        weighted_sum(g, y, 4)
    });
    out.push(("batch_norm_train".into(), e));
    let (rm, rv) = (normal1(&mut r, 4), normal1(&mut r, 4).mapv(|v| v * v + 0.1));
    let e = check_leaves(&leaves, |g, v| {
        let y = batch_norm_eval_graph(g, v[0], v[1], v[2], &rm, &rv);
        weighted_sum(g, y, 4)
    });
    out.push(("batch_norm_eval".into(), e));
    let e = check_leaves(&leaves, |g, v| {
        let y = layer_norm_graph(g, v[0], v[1], v[2]);
        weighted_sum(g, y, 5)
    });
    out.push(("layer_norm".into(), e));

    // Spectral normalization differentiates through the norm estimate with the
    // power-iteration vectors held fixed, which is exact once they have converged.
    let w = normal2(&mut r, 4, 3);
    let mut u = normal1(&mut r, 4);
    u /= u.dot(&u).sqrt();
    for _ in 0..500 {
        u = power_iteration_step(&w, &u).0;
    }
    let e = check_leaves(&[mat(w)], |g, v| {
        let (y, _) = spectral_normalize_graph(g, v[0], &u);
        weighted_sum(g, y, 6)
    });
    out.push(("spectral_normalize".into(), e));
    out
}

pub fn tiny_generator_specs() -> Vec<GeneratorSpec> {
    let mut tt = GeneratorSpec::ttgan(16, 9, 1);
    tt.d_h = 8;
    tt.n_a = 8;
    tt.n_h = 2;
    tt.n_m = 8;
    tt.layers = 2;
    tt.per_layer_rfs = split_rfs(9, 2);
    tt.d_n = 2;
    let mut ta = GeneratorSpec::tagan(16, 9, 1);
    ta.d_h = 8;
    ta.n_a = 8;
    ta.n_h = 2;
    ta.n_k = 2;
    ta.l1 = 1;
    ta.l2 = 1;
    ta.d_n = 2;
    vec![tt, ta]
}

pub fn tiny_discriminator_specs() -> Vec<DiscriminatorSpec> {
    let mut ta = DiscriminatorSpec::tagan(16, 1);
    ta.d_s = 4;
    ta.d_m = 8;
    ta.l1 = 1;
    ta.l2 = 1;
    ta.n_a = 8;
    ta.n_h = 2;
    let mut tt = DiscriminatorSpec::ttgan(16, 1);
    tt.d_h = 8;
    tt.n_a = 8;
    tt.n_h = 4;
    tt.n_m = 8;
    tt.layers = 2;
    tt.augment = Augment::Cumsum;
    vec![ta, tt]
}

/// FD check of a full network w.r.t. every parameter and the input.
/// `run` maps (graph, binding, input var) to the network output.
fn network_gradient_error<R>(inst: &NetworkInstance, input: Array3<f64>, run: R) -> f64
where
    R: Fn(&mut Graph<f64>, &NetworkInstance, &mut Binding, Var) -> Var,
{
    let scalar = |inst: &NetworkInstance, x: &Array3<f64>| {
        let mut g = Graph::<f64>::new();
        let mut b = Binding::new(&mut g, inst, false);
        let xv = g.constant(x.clone());
        let y = run(&mut g, inst, &mut b, xv);
        let s = weighted_sum(&mut g, y, 7);
        g.item(s)
    };
    let mut g = Graph::<f64>::new();
    let mut b = Binding::new(&mut g, inst, true);
    let xv = g.param(input.clone());
    let y = run(&mut g, inst, &mut b, xv);
    let s = weighted_sum(&mut g, y, 7);
    let mut wrt = b.param_vars();
    wrt.push(xv);
    let grads = g.grad(s, &wrt, false);

    let analytic: Vec<Vec<f64>> = grads.iter().map(|&v| g.value(v).iter().copied().collect()).collect();
    let floor = floor_of(&analytic);
    let mut worst = 0.0f64;
    let names: Vec<String> = inst.params.keys().cloned().collect();
    for (pi, name) in names.iter().enumerate() {
        let mut numeric = Vec::new();
        for idx in 0..inst.params[name].len() {
            let mut probe = inst.clone();
            let base = *probe.params[name].iter().nth(idx).unwrap();
            *probe.params[name].iter_mut().nth(idx).unwrap() = base + FD_STEP;
            let up = scalar(&probe, &input);
            *probe.params[name].iter_mut().nth(idx).unwrap() = base - FD_STEP;
            let down = scalar(&probe, &input);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic[pi], &numeric, floor));
    }
    let mut numeric = Vec::new();
    for idx in 0..input.len() {
        let mut x = input.clone();
        x.as_slice_mut().unwrap()[idx] += FD_STEP;
        let up = scalar(inst, &x);
        x.as_slice_mut().unwrap()[idx] -= 2.0 * FD_STEP;
        let down = scalar(inst, &x);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    worst.max(relative_error(analytic.last().unwrap(), &numeric, floor))
}

/// Worst relative FD error for both generator and discriminator families
/// (spectral normalization off, eval-mode statistics for batch norm).
pub fn network_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for mut spec in tiny_generator_specs() {
        spec.spectral_norm = false;
        let mut g = build_generator(&spec, seed).unwrap();
        g.set_mode(NormMode::Eval);
        let z = normal3(&mut r, 2, spec.l + spec.f - 1, spec.d_n);
        let e = network_gradient_error(&g, z, forward::generator);
        out.push((format!("generator_{:?}", spec.family), e));
    }
    for mut spec in tiny_discriminator_specs() {
        spec.spectral_norm = false;
        let d = build_discriminator(&spec, seed).unwrap();
        let x = normal3(&mut r, 2, spec.l, spec.d);
        let e = network_gradient_error(&d, x, forward::discriminator);
        out.push((format!("discriminator_{:?}", spec.family), e));
    }
    out
}

fn generate_f32(inst: &NetworkInstance, z: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::<f32>::new();
    let mut b = Binding::new(&mut g, inst, false);
    let zv = g.constant(z.mapv(|v| v as f32).insert_axis(ndarray::Axis(0)));
    let y = forward::generator(&mut g, inst, &mut b, zv);
    g.value(y).index_axis(ndarray::Axis(0), 0).mapv(f64::from)
}

/// Largest single-precision disagreement between a long generated series and
/// pieces generated from overlapping slices of the same noise, over `seeds` seeds.
pub fn consistency_gap_f32(spec: &GeneratorSpec, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let g = build_generator(spec, seed).unwrap();
        let mut r = rng(1000 + seed);
        let total = 3 * spec.l;
        let z = normal2(&mut r, total + spec.f - 1, spec.d_n);
        let full = generate_f32(&g, &z);
        for start in [0, 1, spec.l / 2, spec.l, 2 * spec.l - 1, 2 * spec.l] {
            let piece = generate_f32(&g, &z.slice(ndarray::s![start..start + spec.l + spec.f - 1, ..]).to_owned());
            for t in 0..spec.l {
                for c in 0..spec.d {
                    worst = worst.max((piece[[t, c]] - full[[start + t, c]]).abs());
                }
            }
        }
    }
    worst
}

/// The generator used for the training smoke run and the consistency check.
pub fn desk_generator() -> GeneratorSpec {
    tsgan::training::desk_generator(64, 63, 1)
}

/// GARCH(1,1) returns with `omega = 0.05`, `alpha = 0.15`, `beta = 0.8` and
/// standard normal innovations, started from the stationary variance.
pub fn garch_series(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    let (omega, alpha, beta): (f64, f64, f64) = (0.05, 0.15, 0.8);
    let mut var = omega / (1.0 - alpha - beta);
    (0..n)
        .map(|_| {
            let z: f64 = r.sample(StandardNormal);
            let x = var.sqrt() * z;
            var = omega + alpha * x * x + beta * var;
            x
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SmokeOutcome {
    pub seed: u64,
    pub acf_abs_before: f64,
    pub acf_abs_after: f64,
    pub kurtosis_after: f64,
    pub w1_one_after: f64,
    pub acf_after: f64,
    pub seconds: f64,
}

impl SmokeOutcome {
    pub fn improvement(&self) -> f64 {
        1.0 - self.acf_abs_after / self.acf_abs_before
    }

    pub fn passed(&self) -> bool {
        self.improvement() >= 0.3 && self.kurtosis_after > 3.5
    }
}

/// Trains the desk TTGAN for `iterations` steps on a GARCH series of length
/// 2500 and scores 64 generated paths of the same length before and after.
pub fn training_smoke(seed: u64, iterations: usize) -> SmokeOutcome {
    use tsgan::metrics::{index_scores, mean_path_moment, Moment};
    use tsgan::training::*;
    let x = garch_series(1, 2500);
    let series = TimeSeriesMatrix::from_column(&x).unwrap();
    let data = make_windows(&series, 64).unwrap();
    let mut g = build_generator(&desk_generator(64, 63, 1), seed).unwrap();
    let mut d = build_discriminator(&desk_discriminator(64, 1), seed + 10_000).unwrap();
    let stats = tsgan::data_io::dataset_stats(&x).unwrap();
    let mut untrained = g.clone();
    untrained
        .set_output_affine(Array1::from_elem(1, stats.std), Array1::from_elem(1, stats.mean))
        .unwrap();
    untrained.set_mode(NormMode::Eval);
    let score = |g: &NetworkInstance| {
        let bundle = sample_paths(g, 64, 2500, 7 + seed).unwrap();
        let report = index_scores(&x, &bundle, 250).unwrap();
        (report, mean_path_moment(&bundle, 0, Moment::Kurt).unwrap())
    };
    let before = score(&untrained).0.get("ACF(abs)").unwrap();
    let cfg = TrainConfig { iterations, seed, ..TrainConfig::desk() };
    let start = std::time::Instant::now();
    train(&mut g, &mut d, &data, &cfg).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let (after, kurt) = score(&g);
    SmokeOutcome {
        seed,
        acf_abs_before: before,
        acf_abs_after: after.get("ACF(abs)").unwrap(),
        kurtosis_after: kurt,
        w1_one_after: after.get("W1(1)").unwrap(),
        acf_after: after.get("ACF").unwrap(),
        seconds,
    }
}

/// A TTGAN discriminator reduced to `D(x) = c * sum(x)`: every block is zeroed,
/// the input projection and head pass channel 0 straight through.
pub fn linear_discriminator(l: usize, d: usize, c: f64) -> NetworkInstance {
    let mut spec = DiscriminatorSpec::ttgan(l, d);
    spec.d_h = 8;
    spec.n_a = 8;
    spec.n_m = 8;
    spec.layers = 1;
    spec.spectral_norm = false;
    let mut inst = build_discriminator(&spec, 0).unwrap();
    for p in inst.params.values_mut() {
        p.fill(0.0);
    }
    inst.params["in.w"].slice_mut(ndarray::s![0, .., 0]).fill(1.0);
    inst.params["head.w"].slice_mut(ndarray::s![0, .., 0]).fill(c);
    inst
}

/// The penalty term evaluated on the tape for a batch of one sample.
pub fn penalty_on_tape(d: &NetworkInstance, x: &Array2<f64>, lambda: f64) -> (f64, f64) {
    let mut g = Graph::<f64>::new();
    let mut b = Binding::new(&mut g, d, true);
    let xv = g.param(x.clone().insert_axis(ndarray::Axis(0)));
    let (p, norms) = tsgan::losses::gradient_penalty_graph(&mut g, d, &mut b, xv, lambda);
    (g.item(p), norms[0])
}

/// Equal-size Wasserstein-1 distance by pairing order statistics.
pub fn w1_sorted_pairing(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Worst deviations `(pairing, shift)` of the merged-grid distance over random trials.
pub fn w1_property_errors(trials: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut pairing, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let n = r.random_range(1..=400);
        let a = normal1(&mut r, n).to_vec();
        let b: Vec<f64> = normal1(&mut r, n).iter().map(|v| 2.0 * v + 0.3).collect();
        let w = tsgan::metrics::wasserstein1(&a, &b).unwrap();
        pairing = pairing.max((w - w1_sorted_pairing(&a, &b)).abs());
        let c: f64 = r.random_range(-3.0..3.0);
        let moved: Vec<f64> = a.iter().map(|v| v + c).collect();
        let w = tsgan::metrics::wasserstein1(&a, &moved).unwrap();
        shift = shift.max((w - c.abs()).abs());
    }
    (pairing, shift)
}

// --------------------------------------------------------------- surfaces

pub fn reference_grid() -> tsgan::surfaces::SurfaceGrid {
    let strikes = (0..7).map(|i| 0.85 + 0.05 * i as f64).collect();
    tsgan::surfaces::SurfaceGrid::geometry(strikes, vec![1.0 / 12.0, 2.0 / 12.0, 3.0 / 12.0, 0.5]).unwrap()
}

/// A mildly smiling log-vol surface with random noise of scale `noise`.
pub fn noisy_surface(r: &mut ChaCha8Rng, grid: &tsgan::surfaces::SurfaceGrid, noise: f64) -> Array1<f64> {
    let n_k = grid.n_strikes();
    Array1::from_shape_fn(grid.channels(), |j| {
        let k = grid.strikes()[j % n_k];
        let base = (0.2 + 0.3 * (k - 1.0).powi(2)).ln();
        base + noise * r.sample::<f64, _>(StandardNormal)
    })
}

/// One-sided Jacobi singular values of `x`, sorted nonincreasing.
pub fn jacobi_singular_values(x: &Array2<f64>) -> Vec<f64> {
    let mut a = x.clone();
    let n = a.ncols();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).dot(&a.column(p));
                let beta = a.column(q).dot(&a.column(q));
                let gamma = a.column(p).dot(&a.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..a.nrows() {
                    let (ap, aq) = (a[[r, p]], a[[r, q]]);
                    a[[r, p]] = c * ap - s * aq;
                    a[[r, q]] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = (0..n).map(|j| a.column(j).dot(&a.column(j)).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Returns `(full-rank round trip error, |truncation error - oracle tail|, orthonormality error)`.
pub fn pca_errors(seed: u64) -> (f64, f64, f64) {
    use tsgan::surfaces::{pca_fit, pca_invert};
    let mut r = rng(seed);
    let x = normal2(&mut r, 50, 28);
    let (full, comps) = pca_fit(&x, 28).unwrap();
    let back = pca_invert(&full, &comps).unwrap();
    let round_trip = (&back - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);

    let k = tsgan::surfaces::DEFAULT_PCA_COMPONENTS;
    let (m, comps) = pca_fit(&x, k).unwrap();
    let approx = pca_invert(&m, &comps).unwrap();
    let err = (&approx - &x).iter().map(|v| v * v).sum::<f64>().sqrt();
    let sigma = jacobi_singular_values(&x);
    let tail = sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt();

    let gram = m.v.t().dot(&m.v);
    let ortho = (&gram - &Array2::<f64>::eye(k)).iter().map(|v| v.abs()).fold(0.0, f64::max);
    (round_trip, (err - tail).abs(), ortho)
}

/// Summary of the arbitrage checks reported by the acceptance target.
#[derive(Debug, Default)]
pub struct ArbitrageFindings {
    pub hand_case_error: f64,
    pub max_residual_violation: usize,
    pub clean_passthrough: bool,
    pub idempotence_gap: f64,
    pub worst_ms: f64,
    pub lp_beaten: usize,
}

fn calls_of(grid: &tsgan::surfaces::SurfaceGrid, row: &Array1<f64>) -> tsgan::surfaces::CallGrid {
    tsgan::surfaces::vol_to_calls(row.view(), grid).unwrap()
}

/// Solves the three-strike, one-maturity example whose middle price sits above the chord.
pub fn hand_lp_case() -> Vec<f64> {
    use tsgan::surfaces::*;
    let c = CallGrid::new(ndarray::array![[0.15], [0.10], [0.02]], vec![0.9, 1.0, 1.1], 0.0, 10.0).unwrap();
    repair_arbitrage(&c).unwrap().prices.iter().copied().collect()
}

pub fn arbitrage_findings(surfaces: usize, lp_points: usize, seed: u64) -> ArbitrageFindings {
    use tsgan::surfaces::*;
    let mut out = ArbitrageFindings::default();
    let expect = [0.15, 0.085, 0.02];
    out.hand_case_error = hand_lp_case().iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let grid = reference_grid();
    let mut r = rng(seed);
    let flat = calls_of(&grid, &Array1::from_elem(28, 0.2f64.ln()));
    let repaired = repair_arbitrage_with_margin(&flat, 0.0).unwrap();
    out.clean_passthrough = repaired.objective == 0.0 && repaired.calls == flat;

    let mut dirty = Vec::new();
    for _ in 0..surfaces {
        let c = calls_of(&grid, &noisy_surface(&mut r, &grid, 0.4));
        let start = std::time::Instant::now();
        let fixed = repair_arbitrage_with_margin(&c, 0.0).unwrap();
        out.worst_ms = out.worst_ms.max(start.elapsed().as_secs_f64() * 1e3);
        out.max_residual_violation = out.max_residual_violation.max(check_no_arbitrage(&fixed.calls).len());
        let again = repair_arbitrage(&fixed.calls).unwrap();
        let gap = (&again.prices - &fixed.calls.prices).iter().map(|v| v.abs()).fold(0.0, f64::max);
        out.idempotence_gap = out.idempotence_gap.max(gap);
        dirty.push((c, fixed));
    }

    // Feasible comparison points: convex mixtures of the repaired surface with
    // Black surfaces of random flat volatility, all inside the constraint cone.
    for k in 0..lp_points {
        let (c, fixed) = &dirty[k % dirty.len()];
        let sigma: f64 = r.random_range(0.05..1.0);
        let black = calls_of(&grid, &Array1::from_elem(28, sigma.ln()));
        let a: f64 = r.random_range(0.0..1.0);
        let mix = &fixed.calls.prices * (1.0 - a) + &black.prices * a;
        let candidate = CallGrid { prices: mix, ..c.clone() };
        if !check_no_arbitrage(&candidate).is_empty() {
            continue;
        }
        let cost: f64 = (&candidate.prices - &c.prices).iter().map(|v| v.abs()).sum();
        if cost < fixed.objective - 1e-12 {
            out.lp_beaten += 1;
        }
    }
    out
}

/// A bundle of `n x t` flat-vol surfaces where the first tenth of the
/// time steps of every path carry a calendar inversion at the longest maturity.
pub fn ten_percent_bundle(n: usize, t: usize) -> tsgan::PathBundle {
    let mut paths = Array3::zeros((n, t, 28));
    for i in 0..n {
        for s in 0..t {
            for j in 0..28 {
                let m = j / 7;
                let mut v = (0.2f64 + 0.01 * m as f64).ln();
                if s < t / 10 && m == 3 {
                    v = 0.05f64.ln();
                }
                paths[[i, s, j]] = v;
            }
        }
    }
    tsgan::PathBundle::new(paths, 0, "synthetic").unwrap()
}

/// Perturbs every noise row of a random generator and counts outputs that
/// moved outside their `f`-row window (`leaks`) and window edges with no
/// influence on the output (`dead_edges`).
pub fn causality_findings(spec: &GeneratorSpec, seed: u64) -> (usize, usize) {
    let g = build_generator(spec, seed).unwrap();
    let (f, l) = (spec.f, spec.l);
    let mut r = rng(seed + 1);
    let base = normal2(&mut r, l + f - 1, spec.d_n);
    let run = |z: &Array2<f64>| generate(&g, &TimeSeriesMatrix::new(z.clone()).unwrap()).unwrap().values().clone();
    let y0 = run(&base);
    let (mut leaks, mut dead_edges) = (0, 0);
    for t in 0..base.nrows() {
        let mut z = base.clone();
        for c in 0..spec.d_n {
            z[[t, c]] += 0.9 - 0.4 * c as f64;
        }
        let y = run(&z);
        for row in 0..l {
            let moved = y.row(row) != y0.row(row);
            let inside = t >= row && t < row + f;
            if moved && !inside {
                leaks += 1;
            }
            if !moved && (t == row || t == row + f - 1) {
                dead_edges += 1;
            }
        }
    }
    (leaks, dead_edges)
}

/// Sample skewness and kurtosis of `n` standard normal draws.
pub fn normal_moments(n: usize, seed: u64) -> (f64, f64) {
    let x = normal1(&mut rng(seed), n).to_vec();
    let s = tsgan::data_io::dataset_stats(&x).unwrap();
    (s.skewness, s.kurtosis)
}

/// Index return statistics for the two reference periods, read from the
/// `date,close` file named by `TSGAN_SP500_CSV`. `None` when the variable is unset.
pub fn index_dataset_stats() -> Option<Vec<(&'static str, tsgan::data_io::DatasetStats)>> {
    use chrono::NaiveDate;
    let path = std::env::var_os("TSGAN_SP500_CSV")?;
    let series = tsgan::data_io::read_price_csv(path).expect("readable index CSV");
    let from = NaiveDate::from_ymd_opt(2009, 5, 1).unwrap();
    let mut out = Vec::new();
    for (name, to) in [("2009-05-01..2018-11-30", (2018, 11, 30)), ("2009-05-01..2020-12-31", (2020, 12, 31))] {
        let to = NaiveDate::from_ymd_opt(to.0, to.1, to.2).unwrap();
        let r = tsgan::data_io::to_log_returns(&series.between(from, to)).unwrap();
        out.push((name, tsgan::data_io::dataset_stats(&r).unwrap()));
    }
    Some(out)
}
