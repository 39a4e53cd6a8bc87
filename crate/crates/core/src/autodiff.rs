//! Reverse-mode differentiation over rank-3 tensors.
//!
//! Every value in a [`Graph`] is an `(batch, rows, cols)` array. Weights use a
//! batch extent of 1 and broadcast against batched activations. The graph is an
//! append-only arena, so node indices are already in topological order.
//!
//! Vector-Jacobian products are themselves built from graph operations. Calling
//! [`Graph::grad`] with `create_graph = true` therefore yields gradient nodes
//! that can be differentiated again, which is what the gradient penalty of
//! WGAN-GP needs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, LinalgScalar, ScalarOperand, Slice, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating point element type usable on the tape (`f32` or `f64`).
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Shape = [usize; 3];

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    /// `order`-th derivative of the tanh-approximated GELU.
    Gelu(Var, u8),
    SumTo(Var),
    BroadcastTo(Var),
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    Softmax(Var),
}

struct Node<F> {
    value: Array3<F>,
    op: Op,
    tracked: bool,
}

/// Append-only computation graph.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_of<F>(a: &Array3<F>) -> Shape {
    let (b, r, c) = a.dim();
    [b, r, c]
}

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 3];
    for ax in 0..3 {
        out[ax] = match (a[ax], b[ax]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => panic!("incompatible broadcast {a:?} vs {b:?} on axis {ax} ({x} vs {y})"),
        };
    }
    out
}

fn sum_to_value<F: Real>(a: &Array3<F>, target: Shape) -> Array3<F> {
    let src = shape_of(a);
    if src == target {
        return a.clone();
    }
    let mut r = a.clone();
    for ax in 0..3 {
        if target[ax] == 1 && src[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        } else {
            assert_eq!(
                target[ax], src[ax],
                "sum_to: cannot reduce {src:?} to {target:?}"
            );
        }
    }
    r
}

/// Tanh-approximated GELU and its first two derivatives.
pub fn gelu_scalar<F: Real>(x: F, order: u8) -> F {
    let a = F::lit(0.044715);
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let (half, one, three) = (F::lit(0.5), F::one(), F::lit(3.0));
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let s = one - t * t;
    let du = c * (one + three * a * x * x);
    match order {
        0 => half * x * (one + t),
        1 => half * (one + t) + half * x * s * du,
        2 => s * du - x * t * s * du * du + three * a * c * x * x * s,
        _ => panic!("GELU derivative of order {order} is not implemented"),
    }
}

fn standard<F: Real>(a: Array3<F>) -> Array3<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn gemm<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    a.dot(&b)
}

fn matmul_value<F: Real>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    let [ba, n, k] = shape_of(a);
    let [bb, k2, m] = shape_of(b);
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    if bb == 1 && a.is_standard_layout() {
        let a2 = a
            .view()
            .into_shape_with_order((ba * n, k))
            .expect("standard layout");
        let mut out = gemm(a2, b.index_axis(Axis(0), 0));
        if !out.is_standard_layout() {
            out = out.as_standard_layout().into_owned();
        }
        return out.into_shape_with_order((ba, n, m)).expect("contiguous");
    }
    let batch = broadcast_shape([ba, 1, 1], [bb, 1, 1])[0];
    let mut out = Array3::<F>::zeros((batch, n, m));
    for i in 0..batch {
        let ai = a.index_axis(Axis(0), if ba == 1 { 0 } else { i });
        let bi = b.index_axis(Axis(0), if bb == 1 { 0 } else { i });
        out.index_axis_mut(Axis(0), i).assign(&gemm(ai, bi));
    }
    out
}

fn softmax_value<F: Real>(a: &Array3<F>) -> Array3<F> {
    let mut out = a.as_standard_layout().into_owned();
    let n = out.dim().2;
    let floor = F::lit(-80.0);
    let data = out.as_slice_mut().expect("standard layout");
    for lane in data.chunks_exact_mut(n.max(1)) {
        let max = lane.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut total = F::zero();
        for x in lane.iter_mut() {
            let z = *x - max;
            *x = if z < floor { F::zero() } else { z.exp() };
            total += *x;
        }
        let inv = F::one() / total;
        for x in lane.iter_mut() {
            *x *= inv;
        }
    }
    out
}

fn softplus_scalar<F: Real>(x: F) -> F {
    // ln(1 + e^x) without overflow
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array3<F>, op: Op, inputs: &[Var]) -> Var {
        let tracked = self.recording && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: standard(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients may be taken with respect to.
    pub fn param(&mut self, value: Array3<F>) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array3<F>) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.constant(Array3::from_elem((1, 1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array3<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        shape_of(&self.nodes[v.0].value)
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Scalar value of a `(1, 1, 1)` node.
    pub fn item(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "item() on non-scalar node");
        val[[0, 0, 0]]
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_value(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).view().permuted_axes([0, 2, 1]).to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::lit(c);
        let v = self.value(a).mapv(|x| x * cf);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cf = F::lit(c);
        let v = self.value(a).mapv(|x| x + cf);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let pf = F::lit(p);
        let v = if p == 2.0 {
            self.value(a).mapv(|x| x * x)
        } else {
            self.value(a).mapv(|x| x.powf(pf))
        };
        self.push(v, Op::Powf(a, p), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    /// `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.gelu_derivative(a, 0)
    }

    fn gelu_derivative(&mut self, a: Var, order: u8) -> Var {
        let v = self.value(a).mapv(|x| gelu_scalar(x, order));
        self.push(v, Op::Gelu(a, order), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus_scalar);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let sf = F::lit(slope);
        let v = self
            .value(a)
            .mapv(|x| if x > F::zero() { x } else { x * sf });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    /// Sums over every axis where `target` has extent 1.
    pub fn sum_to(&mut self, a: Var, target: Shape) -> Var {
        if self.shape(a) == target {
            return a;
        }
        let v = sum_to_value(self.value(a), target);
        self.push(v, Op::SumTo(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.sum_to(a, [1, 1, 1])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_to(&mut self, a: Var, target: Shape) -> Var {
        if self.shape(a) == target {
            return a;
        }
        let v = self
            .value(a)
            .broadcast(target)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {target:?}", self.shape(a)))
            .to_owned();
        self.push(v, Op::BroadcastTo(a), &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let sh = self.shape(a);
        assert!(start + len <= sh[axis], "slice out of range");
        if start == 0 && len == sh[axis] {
            return a;
        }
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Embeds `a` into zeros of extent `total` along `axis`, starting at `start`.
    pub fn pad(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Var {
        let mut sh = self.shape(a);
        let len = sh[axis];
        if start == 0 && len == total {
            return a;
        }
        sh[axis] = total;
        let mut v = Array3::zeros(sh);
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value(a));
        self.push(v, Op::Pad { x: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        if xs.len() == 1 {
            return xs[0];
        }
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// `out[b, r, :] = a[b, idx[r], :]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let [b, _, c] = self.shape(a);
        let src = self.value(a);
        let mut v = Array3::zeros((b, idx.len(), c));
        for (r, &i) in idx.iter().enumerate() {
            v.slice_mut(s![.., r, ..]).assign(&src.slice(s![.., i, ..]));
        }
        self.push(v, Op::GatherRows(a, idx), &[a])
    }

    /// `out[b, idx[r], :] += a[b, r, :]` into `rows` output rows.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let [b, _, c] = self.shape(a);
        let src = self.value(a);
        let mut v = Array3::zeros((b, rows, c));
        for (r, &i) in idx.iter().enumerate() {
            let mut dst = v.slice_mut(s![.., i, ..]);
            dst += &src.slice(s![.., r, ..]);
        }
        self.push(v, Op::ScatterRows(a, idx), &[a])
    }

    /// Softmax along the last axis (row max is subtracted before exponentiation).
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_value(self.value(a));
        self.push(v, Op::Softmax(a), &[a])
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar node `out` with respect to `wrt`.
    ///
    /// Unreachable inputs get a zero gradient. With `create_graph` the returned
    /// nodes are themselves differentiable.
    pub fn grad(&mut self, out: Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
        assert_eq!(self.value(out).len(), 1, "grad() needs a scalar output");
        let n = out.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if relevant[i] || !self.nodes[i].tracked {
                continue;
            }
            relevant[i] = self.inputs(i).iter().any(|v| relevant[v.0]);
        }

        let prev = self.recording;
        self.recording = create_graph;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = Array3::from_elem(shape_of(self.value(out)), F::one());
        grads[out.0] = Some(self.constant(seed));

        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(Var(i), &op, g, &relevant);
            for (input, contrib) in contributions {
                if input.0 >= n || !relevant[input.0] {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }
        self.recording = prev;

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Array3::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect()
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::Gelu(a, _)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::Softmax(a) => vec![*a],
            Op::Slice { x, .. } | Op::Pad { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    fn reduce_to(&mut self, g: Var, target: Var) -> Var {
        let t = self.shape(target);
        self.sum_to(g, t)
    }

    fn vjp(&mut self, node: Var, op: &Op, g: Var, relevant: &[bool]) -> Vec<(Var, Var)> {
        let need = |v: Var| relevant.get(v.0).copied().unwrap_or(false);
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if need(a) {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    out.push((a, self.reduce_to(ga, a)));
                }
                if need(b) {
                    let gb = self.matmul_tn(a, g);
                    out.push((b, self.reduce_to(gb, b)));
                }
                out
            }
            Op::Transpose(a) => vec![(a, self.transpose(g))],
            Op::Add(a, b) => {
                let ga = self.reduce_to(g, a);
                let gb = self.reduce_to(g, b);
                vec![(a, ga), (b, gb)]
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(g, a);
                let gb = self.reduce_to(g, b);
                let gb = self.neg(gb);
                vec![(a, ga), (b, gb)]
            }
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if need(a) {
                    let t = self.mul(g, b);
                    out.push((a, self.reduce_to(t, a)));
                }
                if need(b) {
                    let t = self.mul(g, a);
                    out.push((b, self.reduce_to(t, b)));
                }
                out
            }
            Op::Neg(a) => vec![(a, self.neg(g))],
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Powf(a, p) => {
                if p == 0.0 {
                    return vec![];
                }
                if p == 1.0 {
                    return vec![(a, g)];
                }
                let d = if p == 2.0 { a } else { self.powf(a, p - 1.0) };
                let d = self.scale(d, p);
                vec![(a, self.mul(g, d))]
            }
            Op::Exp(a) => vec![(a, self.mul(g, node))],
            Op::Ln(a) => {
                let inv = self.powf(a, -1.0);
                vec![(a, self.mul(g, inv))]
            }
            Op::Tanh(a) => {
                let sq = self.powf(node, 2.0);
                let one_minus = self.neg(sq);
                let one_minus = self.add_scalar(one_minus, 1.0);
                vec![(a, self.mul(g, one_minus))]
            }
            Op::Gelu(a, order) => {
                assert!(order < 2, "GELU derivatives are available up to second order");
                let d = self.gelu_derivative(a, order + 1);
                vec![(a, self.mul(g, d))]
            }
            Op::Sigmoid(a) => {
                let neg = self.neg(node);
                let comp = self.add_scalar(neg, 1.0);
                let d = self.mul(node, comp);
                vec![(a, self.mul(g, d))]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                vec![(a, self.mul(g, s))]
            }
            Op::LeakyRelu(a, slope) => {
                let sf = F::lit(slope);
                let mask = self
                    .value(a)
                    .mapv(|x| if x > F::zero() { F::one() } else { sf });
                let m = self.constant(mask);
                vec![(a, self.mul(g, m))]
            }
            Op::SumTo(a) => {
                let t = self.shape(a);
                vec![(a, self.broadcast_to(g, t))]
            }
            Op::BroadcastTo(a) => vec![(a, self.reduce_to(g, a))],
            Op::Slice { x, axis, start } => {
                let total = self.shape(x)[axis];
                vec![(x, self.pad(g, axis, start, total))]
            }
            Op::Pad { x, axis, start } => {
                let len = self.shape(x)[axis];
                vec![(x, self.slice(g, axis, start, len))]
            }
            Op::Concat { ref xs, axis } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = self.shape(x)[axis];
                    if need(x) {
                        out.push((x, self.slice(g, axis, offset, len)));
                    }
                    offset += len;
                }
                out
            }
            Op::GatherRows(a, ref idx) => {
                let rows = self.shape(a)[1];
                vec![(a, self.scatter_rows(g, idx.clone(), rows))]
            }
            Op::ScatterRows(a, ref idx) => vec![(a, self.gather_rows(g, idx.clone()))],
            Op::Softmax(a) => {
                let gy = self.mul(g, node);
                let [b, r, _] = self.shape(gy);
                let rowsum = self.sum_to(gy, [b, r, 1]);
                let t = self.mul(node, rowsum);
                vec![(a, self.sub(gy, t))]
            }
        }
    }

    /// `aᵀ · g` per batch element.
    fn matmul_tn(&mut self, a: Var, g: Var) -> Var {
        let at = self.transpose(a);
        self.matmul(at, g)
    }
}

/// Frobenius inner product helper used by tests and losses.
pub fn dot_all<F: Real>(a: &Array3<F>, b: &Array3<F>) -> F {
    let mut acc = F::zero();
    Zip::from(a).and(b).for_each(|&x, &y| acc += x * y);
    acc
}
