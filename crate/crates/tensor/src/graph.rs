//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Values are
//! reference-counted so parameters can be bound without copying. Nodes that
//! do not depend on any grad-requiring leaf are recorded but skipped during
//! the backward sweep, which is how frozen networks stay cheap.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum Unary<T> {
    LeakyRelu(T),
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    /// `sqrt(x + eps)`; the derivative is taken as zero where the argument is zero.
    Sqrt(T),
    /// `1 / sqrt(x + eps)`
    Rsqrt(T),
    Exp,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary<T>),
    MatMul(usize, usize),
    Transpose(usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AddChannelBias { x: usize, b: usize },
    MulChannel { x: usize, s: usize },
    AddBroadcast { x: usize, b: usize },
    BroadcastBatch { x: usize },
    Upsample2x(usize),
    AvgPool2x2(usize),
    GlobalAvgPool(usize),
    SumAll(usize),
    MeanAll(usize),
    SumInner { x: usize, inner: usize },
    Reshape(usize),
    Concat1(Vec<usize>),
    Slice1 { x: usize, lo: usize },
    Concat0(Vec<usize>),
    Slice0 { x: usize, lo: usize },
    AddNoise { x: usize, noise: usize, strength: usize },
    Normalize1 { x: usize, eps: T },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<'g, T: Scalar> std::fmt::Debug for Var<'g, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(&v.id)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.by_id.remove(&v.id)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary_node(&self, x: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary_node(&self, a: usize, b: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Gradients of a single-element `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        assert!(std::ptr::eq(loss.graph, self), "loss from another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |p: usize, g: Tensor<T>| {
                if nodes[p].requires_grad {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            };
            let want = |p: usize| nodes[p].requires_grad;
            let val = |p: usize| &*nodes[p].value;
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, gy);
                }
                Op::Add(a, b) => {
                    if want(*b) {
                        send(*b, gy.clone());
                    }
                    send(*a, gy);
                }
                Op::Sub(a, b) => {
                    if want(*b) {
                        send(*b, gy.scale(-T::one()));
                    }
                    send(*a, gy);
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        send(*a, gy.mul(val(*b)));
                    }
                    if want(*b) {
                        send(*b, gy.mul(val(*a)));
                    }
                }
                Op::Scale(a, c) => send(*a, gy.scale(*c)),
                Op::AddScalar(a) => send(*a, gy),
                Op::Unary(a, f) => {
                    let x = val(*a);
                    let y = &*node.value;
                    send(*a, unary_backward(*f, x, y, &gy));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                    if want(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm(m, n, k, gy.data(), false, bv.data(), true, &mut da, false);
                        send(*a, Tensor::new_unchecked(vec![m, k], da));
                    }
                    if want(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm(k, m, n, av.data(), true, gy.data(), false, &mut db, false);
                        send(*b, Tensor::new_unchecked(vec![k, n], db));
                    }
                }
                Op::Transpose(a) => send(*a, gy.transpose()),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (bsz, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    if want(*x) {
                        let mut dx = vec![T::zero(); bsz * i];
                        gemm(bsz, o, i, gy.data(), false, wv.data(), false, &mut dx, false);
                        send(*x, Tensor::new_unchecked(vec![bsz, i], dx));
                    }
                    if want(*w) {
                        let mut dw = vec![T::zero(); o * i];
                        gemm(o, bsz, i, gy.data(), true, xv.data(), false, &mut dw, false);
                        send(*w, Tensor::new_unchecked(vec![o, i], dw));
                    }
                    if let Some(b) = b {
                        if want(*b) {
                            send(*b, sum_leading(&gy, bsz));
                        }
                    }
                }
                Op::Conv2d { x, w, geom } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (dx, dw) = kernels::conv2d_backward(
                        xv.data(),
                        xv.dim(0),
                        wv.data(),
                        gy.data(),
                        geom,
                        want(*x),
                        want(*w),
                    );
                    if let Some(dx) = dx {
                        send(*x, Tensor::new_unchecked(xv.shape().to_vec(), dx));
                    }
                    if let Some(dw) = dw {
                        send(*w, Tensor::new_unchecked(wv.shape().to_vec(), dw));
                    }
                }
                Op::AddChannelBias { x, b } => {
                    if want(*b) {
                        let (bsz, c) = (gy.dim(0), gy.dim(1));
                        let plane = gy.len() / (bsz * c);
                        let mut db = vec![T::zero(); c];
                        for (i, chunk) in gy.data().chunks(plane).enumerate() {
                            db[i % c] += chunk.iter().copied().sum();
                        }
                        send(*b, Tensor::new_unchecked(vec![c], db));
                    }
                    send(*x, gy);
                }
                Op::MulChannel { x, s } => {
                    let (xv, sv) = (val(*x), val(*s));
                    let bc = sv.len();
                    let plane = xv.len() / bc;
                    if want(*s) {
                        let ds: Vec<T> = gy
                            .data()
                            .chunks(plane)
                            .zip(xv.data().chunks(plane))
                            .map(|(g, x)| g.iter().zip(x).map(|(&g, &x)| g * x).sum())
                            .collect();
                        send(*s, Tensor::new_unchecked(sv.shape().to_vec(), ds));
                    }
                    if want(*x) {
                        let mut dx = gy;
                        for (chunk, &sc) in dx.data_mut().chunks_mut(plane).zip(sv.data()) {
                            chunk.iter_mut().for_each(|v| *v *= sc);
                        }
                        send(*x, dx);
                    }
                }
                Op::AddBroadcast { x, b } => {
                    if want(*b) {
                        let bv = val(*b);
                        send(*b, sum_leading(&gy, gy.len() / bv.len()).reshape(bv.shape()).unwrap());
                    }
                    send(*x, gy);
                }
                Op::BroadcastBatch { x } => {
                    let xv = val(*x);
                    let reps = gy.len() / xv.len();
                    send(*x, sum_leading(&gy, reps).reshape(xv.shape()).unwrap());
                }
                Op::Upsample2x(x) => {
                    let xv = val(*x);
                    let (h, w) = (xv.dim(2), xv.dim(3));
                    let planes = xv.len() / (h * w);
                    let d = kernels::upsample2x_backward(gy.data(), planes, h, w);
                    send(*x, Tensor::new_unchecked(xv.shape().to_vec(), d));
                }
                Op::AvgPool2x2(x) => {
                    let xv = val(*x);
                    let (h, w) = (xv.dim(2), xv.dim(3));
                    let planes = xv.len() / (h * w);
                    let d = kernels::avgpool2x2_backward(gy.data(), planes, h, w);
                    send(*x, Tensor::new_unchecked(xv.shape().to_vec(), d));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = val(*x);
                    let plane = xv.len() / gy.len();
                    let inv = T::one() / T::lit(plane as f64);
                    let mut d = Vec::with_capacity(xv.len());
                    for &g in gy.data() {
                        d.extend(std::iter::repeat(g * inv).take(plane));
                    }
                    send(*x, Tensor::new_unchecked(xv.shape().to_vec(), d));
                }
                Op::SumAll(x) => {
                    let xv = val(*x);
                    send(*x, Tensor::full(xv.shape(), gy.item()));
                }
                Op::MeanAll(x) => {
                    let xv = val(*x);
                    let g = gy.item() / T::lit(xv.len() as f64);
                    send(*x, Tensor::full(xv.shape(), g));
                }
                Op::SumInner { x, inner } => {
                    let xv = val(*x);
                    let mut d = Vec::with_capacity(xv.len());
                    for &g in gy.data() {
                        d.extend(std::iter::repeat(g).take(*inner));
                    }
                    send(*x, Tensor::new_unchecked(xv.shape().to_vec(), d));
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(*x, gy.reshape(&shape).unwrap());
                }
                Op::Concat1(parts) => {
                    let outer = gy.dim(0);
                    let row = gy.len() / outer;
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let prow = pv.len() / outer;
                        if want(p) {
                            let mut d = Vec::with_capacity(pv.len());
                            for b in 0..outer {
                                d.extend_from_slice(&gy.data()[b * row + offset..b * row + offset + prow]);
                            }
                            send(p, Tensor::new_unchecked(pv.shape().to_vec(), d));
                        }
                        offset += prow;
                    }
                }
                Op::Slice1 { x, lo } => {
                    let xv = val(*x);
                    let outer = xv.dim(0);
                    let inner = numel(&xv.shape()[2..]);
                    let row = xv.len() / outer;
                    let grow = gy.len() / outer;
                    let mut d = vec![T::zero(); xv.len()];
                    for b in 0..outer {
                        let dst = b * row + lo * inner;
                        d[dst..dst + grow].copy_from_slice(&gy.data()[b * grow..(b + 1) * grow]);
                    }
                    send(*x, Tensor::new_unchecked(xv.shape().to_vec(), d));
                }
                Op::Concat0(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if want(p) {
                            let d = gy.data()[offset..offset + n].to_vec();
                            send(p, Tensor::new_unchecked(val(p).shape().to_vec(), d));
                        }
                        offset += n;
                    }
                }
                Op::Slice0 { x, lo } => {
                    let xv = val(*x);
                    let row = xv.row_len();
                    let mut d = vec![T::zero(); xv.len()];
                    d[lo * row..lo * row + gy.len()].copy_from_slice(gy.data());
                    send(*x, Tensor::new_unchecked(xv.shape().to_vec(), d));
                }
                Op::AddNoise { x, noise, strength } => {
                    if want(*strength) {
                        let nv = val(*noise);
                        let plane = nv.len();
                        let ds: T = gy
                            .data()
                            .chunks(plane)
                            .map(|c| c.iter().zip(nv.data()).map(|(&g, &n)| g * n).sum::<T>())
                            .sum();
                        send(*strength, Tensor::scalar(ds));
                    }
                    send(*x, gy);
                }
                Op::Normalize1 { x, eps } => {
                    let xv = val(*x);
                    let y = &*node.value;
                    send(*x, normalize1_backward(xv, y, &gy, *eps));
                }
            }
        }
        Grads { by_id: leaves }
    }
}

fn sum_leading<T: Scalar>(g: &Tensor<T>, reps: usize) -> Tensor<T> {
    let inner = g.len() / reps;
    let mut out = vec![T::zero(); inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    let shape = if g.ndim() > 1 && g.dim(0) == reps { g.shape()[1..].to_vec() } else { vec![inner] };
    Tensor::new_unchecked(shape, out)
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_forward<T: Scalar>(f: Unary<T>, x: &Tensor<T>) -> Tensor<T> {
    match f {
        Unary::LeakyRelu(s) => x.map(|v| if v >= T::zero() { v } else { v * s }),
        Unary::Tanh => x.map(|v| v.tanh()),
        Unary::Sigmoid => x.map(sigmoid),
        Unary::Softplus => x.map(softplus),
        Unary::Square => x.map(|v| v * v),
        Unary::Sqrt(eps) => x.map(|v| (v + eps).sqrt()),
        Unary::Rsqrt(eps) => x.map(|v| T::one() / (v + eps).sqrt()),
        Unary::Exp => x.map(|v| v.exp()),
    }
}

fn unary_backward<T: Scalar>(f: Unary<T>, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let d: Vec<T> = match f {
        Unary::LeakyRelu(s) => x
            .data()
            .iter()
            .zip(gy.data())
            .map(|(&x, &g)| if x >= T::zero() { g } else { g * s })
            .collect(),
        Unary::Tanh => y.data().iter().zip(gy.data()).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
        Unary::Sigmoid => y.data().iter().zip(gy.data()).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
        Unary::Softplus => x.data().iter().zip(gy.data()).map(|(&x, &g)| g * sigmoid(x)).collect(),
        Unary::Square => x.data().iter().zip(gy.data()).map(|(&x, &g)| g * (x + x)).collect(),
        Unary::Sqrt(_) => y
            .data()
            .iter()
            .zip(gy.data())
            .map(|(&y, &g)| if y > T::zero() { g * half / y } else { T::zero() })
            .collect(),
        // d/dx (x+eps)^(-1/2) = -1/2 (x+eps)^(-3/2) = -1/2 y^3
        Unary::Rsqrt(_) => y.data().iter().zip(gy.data()).map(|(&y, &g)| -g * half * y * y * y).collect(),
        Unary::Exp => y.data().iter().zip(gy.data()).map(|(&y, &g)| g * y).collect(),
    };
    Tensor::new_unchecked(x.shape().to_vec(), d)
}

/// Splits `[B, C, rest..]` into (B, C, spatial).
fn dims1<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let b = x.dim(0);
    let c = x.dim(1);
    (b, c, x.len() / (b * c))
}

fn normalize1_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let (b, c, s) = dims1(x);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for si in 0..s {
            let mut ss = T::zero();
            for ci in 0..c {
                let v = xd[(bi * c + ci) * s + si];
                ss += v * v;
            }
            let inv = T::one() / (ss + eps).sqrt();
            for ci in 0..c {
                let i = (bi * c + ci) * s + si;
                out[i] = xd[i] * inv;
            }
        }
    }
    Tensor::new_unchecked(x.shape().to_vec(), out)
}

fn normalize1_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>, eps: T) -> Tensor<T> {
    let (b, c, s) = dims1(x);
    let (xd, yd, gd) = (x.data(), y.data(), gy.data());
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for si in 0..s {
            let mut ss = T::zero();
            let mut dot = T::zero();
            for ci in 0..c {
                let i = (bi * c + ci) * s + si;
                ss += xd[i] * xd[i];
                dot += gd[i] * yd[i];
            }
            let inv = T::one() / (ss + eps).sqrt();
            for ci in 0..c {
                let i = (bi * c + ci) * s + si;
                out[i] = (gd[i] - yd[i] * dot) * inv;
            }
        }
    }
    Tensor::new_unchecked(x.shape().to_vec(), out)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    /// Copy of the value.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.dim(i)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Single-element value.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut off from the gradient path.
    pub fn detach(self) -> Self {
        let v = self.value();
        self.graph.constant_shared(v)
    }

    fn same_graph(&self, other: &Self) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn binary_same(self, other: Self, f: impl Fn(T, T) -> T, op: Op<T>) -> Self {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let v = a.zip_map(&b, f);
        self.graph.binary_node(self.id, other.id, v, op)
    }

    pub fn add(self, other: Self) -> Self {
        self.binary_same(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary_same(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary_same(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Self {
        let v = self.value().scale(c);
        self.graph.unary_node(self.id, v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let v = self.value().map(|x| x + c);
        self.graph.unary_node(self.id, v, Op::AddScalar(self.id))
    }

    pub fn unary(self, f: Unary<T>) -> Self {
        let v = unary_forward(f, &self.value());
        self.graph.unary_node(self.id, v, Op::Unary(self.id, f))
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        self.unary(Unary::LeakyRelu(T::lit(slope)))
    }

    pub fn relu(self) -> Self {
        self.unary(Unary::LeakyRelu(T::zero()))
    }

    pub fn tanh(self) -> Self {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Self {
        self.unary(Unary::Softplus)
    }

    pub fn square(self) -> Self {
        self.unary(Unary::Square)
    }

    pub fn sqrt(self, eps: f64) -> Self {
        self.unary(Unary::Sqrt(T::lit(eps)))
    }

    pub fn rsqrt(self, eps: f64) -> Self {
        self.unary(Unary::Rsqrt(T::lit(eps)))
    }

    pub fn exp(self) -> Self {
        self.unary(Unary::Exp)
    }

    /// `[M, K] · [K, N]`
    pub fn matmul(self, other: Self) -> Self {
        self.same_graph(&other);
        let v = self.value().matmul(&other.value());
        self.graph.binary_node(self.id, other.id, v, Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Self {
        let v = self.value().transpose();
        self.graph.unary_node(self.id, v, Op::Transpose(self.id))
    }

    /// `x · wᵀ + b` for `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(self, w: Self, b: Option<Self>) -> Self {
        let (xv, wv) = (self.value(), w.value());
        assert_eq!(xv.ndim(), 2, "linear input must be [B, I], got {:?}", xv.shape());
        let (bsz, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
        assert_eq!(wv.dim(1), i, "linear weight {:?} vs input {:?}", wv.shape(), xv.shape());
        let mut out = vec![T::zero(); bsz * o];
        gemm(bsz, i, o, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.map_or(false, |b| b.requires_grad());
        self.graph.push(
            Tensor::new_unchecked(vec![bsz, o], out),
            Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) },
            rg,
        )
    }

    /// Cross-correlation of `[B, Ci, H, W]` with `[Co, Ci, KH, KW]`.
    pub fn conv2d(self, w: Self, stride: usize, pad: usize) -> Self {
        let (xv, wv) = (self.value(), w.value());
        assert_eq!(xv.ndim(), 4, "conv2d input {:?}", xv.shape());
        assert_eq!(wv.ndim(), 4, "conv2d weight {:?}", wv.shape());
        assert_eq!(xv.dim(1), wv.dim(1), "conv2d channels: input {:?} weight {:?}", xv.shape(), wv.shape());
        let geom = ConvGeom {
            cin: xv.dim(1),
            h: xv.dim(2),
            w: xv.dim(3),
            cout: wv.dim(0),
            kh: wv.dim(2),
            kw: wv.dim(3),
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(xv.data(), xv.dim(0), wv.data(), &geom);
        let shape = vec![xv.dim(0), geom.cout, geom.out_h(), geom.out_w()];
        self.graph
            .binary_node(self.id, w.id, Tensor::new_unchecked(shape, out), Op::Conv2d { x: self.id, w: w.id, geom })
    }

    /// Adds `b[c]` to every entry of channel `c` of a `[B, C, ..]` tensor.
    pub fn add_channel_bias(self, b: Self) -> Self {
        let (xv, bv) = (self.value(), b.value());
        let (bsz, c, s) = dims1(&xv);
        assert_eq!(bv.len(), c, "channel bias size");
        let mut out = xv.data().to_vec();
        for bi in 0..bsz {
            for ci in 0..c {
                let bb = bv.data()[ci];
                out[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter_mut().for_each(|v| *v += bb);
            }
        }
        self.graph.binary_node(
            self.id,
            b.id,
            Tensor::new_unchecked(xv.shape().to_vec(), out),
            Op::AddChannelBias { x: self.id, b: b.id },
        )
    }

    /// Multiplies channel `c` of sample `b` by `s[b, c]`.
    pub fn mul_channel(self, s: Self) -> Self {
        let (xv, sv) = (self.value(), s.value());
        let (bsz, c, plane) = dims1(&xv);
        assert_eq!(sv.shape(), &[bsz, c], "mul_channel scale {:?} for {:?}", sv.shape(), xv.shape());
        let mut out = xv.data().to_vec();
        for (chunk, &sc) in out.chunks_mut(plane).zip(sv.data()) {
            chunk.iter_mut().for_each(|v| *v *= sc);
        }
        self.graph.binary_node(
            self.id,
            s.id,
            Tensor::new_unchecked(xv.shape().to_vec(), out),
            Op::MulChannel { x: self.id, s: s.id },
        )
    }

    /// `x[b, ..] + b[..]` where `b` matches everything after the batch axis.
    pub fn add_broadcast(self, b: Self) -> Self {
        let (xv, bv) = (self.value(), b.value());
        let row = xv.row_len();
        assert_eq!(bv.len(), row, "add_broadcast: {:?} onto {:?}", bv.shape(), xv.shape());
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(row) {
            for (v, &bb) in chunk.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        self.graph.binary_node(
            self.id,
            b.id,
            Tensor::new_unchecked(xv.shape().to_vec(), out),
            Op::AddBroadcast { x: self.id, b: b.id },
        )
    }

    /// Repeats a `[1, ..]` tensor `batch` times along the leading axis.
    pub fn broadcast_batch(self, batch: usize) -> Self {
        let xv = self.value();
        assert_eq!(xv.dim(0), 1, "broadcast_batch needs a leading axis of 1");
        let mut data = Vec::with_capacity(xv.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(xv.data());
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = batch;
        self.graph.unary_node(self.id, Tensor::new_unchecked(shape, data), Op::BroadcastBatch { x: self.id })
    }

    pub fn upsample2x(self) -> Self {
        let xv = self.value();
        let (h, w) = (xv.dim(2), xv.dim(3));
        let planes = xv.len() / (h * w);
        let out = kernels::upsample2x(xv.data(), planes, h, w);
        let shape = vec![xv.dim(0), xv.dim(1), 2 * h, 2 * w];
        self.graph.unary_node(self.id, Tensor::new_unchecked(shape, out), Op::Upsample2x(self.id))
    }

    pub fn avg_pool2x2(self) -> Self {
        let xv = self.value();
        let (h, w) = (xv.dim(2), xv.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x2 on odd size {:?}", xv.shape());
        let planes = xv.len() / (h * w);
        let out = kernels::avgpool2x2(xv.data(), planes, h, w);
        let shape = vec![xv.dim(0), xv.dim(1), h / 2, w / 2];
        self.graph.unary_node(self.id, Tensor::new_unchecked(shape, out), Op::AvgPool2x2(self.id))
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(self) -> Self {
        let xv = self.value();
        let (b, c, s) = dims1(&xv);
        let inv = T::one() / T::lit(s as f64);
        let out: Vec<T> = xv.data().chunks(s).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.graph.unary_node(self.id, Tensor::new_unchecked(vec![b, c], out), Op::GlobalAvgPool(self.id))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.graph.unary_node(self.id, v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Self {
        let v = Tensor::scalar(self.value().mean());
        self.graph.unary_node(self.id, v, Op::MeanAll(self.id))
    }

    /// Sums contiguous runs of `inner` elements: `[.., inner] -> [..]`
    /// (the result is returned as `[len / inner]`).
    pub fn sum_inner(self, inner: usize) -> Self {
        let xv = self.value();
        assert_eq!(xv.len() % inner, 0, "sum_inner({inner}) of {:?}", xv.shape());
        let out: Vec<T> = xv.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        let n = out.len();
        self.graph.unary_node(self.id, Tensor::new_unchecked(vec![n], out), Op::SumInner { x: self.id, inner })
    }

    /// Per-sample sum: `[B, ..] -> [B]`.
    pub fn sum_per_sample(self) -> Self {
        let inner = self.value().row_len();
        self.sum_inner(inner)
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = self.value().reshaped(shape).expect("reshape");
        self.graph.unary_node(self.id, v, Op::Reshape(self.id))
    }

    /// Concatenates along axis 1; all parts share axis 0 and trailing axes.
    pub fn concat1(parts: &[Self]) -> Self {
        let graph = parts[0].graph;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let outer = vals[0].dim(0);
        let trailing = vals[0].shape()[2..].to_vec();
        let mut c = 0;
        for v in &vals {
            assert_eq!(v.dim(0), outer, "concat1 leading axis");
            assert_eq!(&v.shape()[2..], &trailing[..], "concat1 trailing axes");
            c += v.dim(1);
        }
        let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
        for b in 0..outer {
            for v in &vals {
                let r = v.len() / outer;
                data.extend_from_slice(&v.data()[b * r..(b + 1) * r]);
            }
        }
        let mut shape = vec![outer, c];
        shape.extend_from_slice(&trailing);
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(Tensor::new_unchecked(shape, data), Op::Concat1(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Entries `lo..hi` along axis 1.
    pub fn slice1(self, lo: usize, hi: usize) -> Self {
        let xv = self.value();
        assert!(lo < hi && hi <= xv.dim(1), "slice1 {lo}..{hi} of {:?}", xv.shape());
        let outer = xv.dim(0);
        let inner = numel(&xv.shape()[2..]);
        let row = xv.len() / outer;
        let mut data = Vec::with_capacity(outer * (hi - lo) * inner);
        for b in 0..outer {
            data.extend_from_slice(&xv.data()[b * row + lo * inner..b * row + hi * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = hi - lo;
        self.graph.unary_node(self.id, Tensor::new_unchecked(shape, data), Op::Slice1 { x: self.id, lo })
    }

    /// Concatenates along the batch axis.
    pub fn concat0(parts: &[Self]) -> Self {
        let graph = parts[0].graph;
        let vals: Vec<Tensor<T>> = parts.iter().map(|p| p.tensor()).collect();
        let v = Tensor::cat_batch(&vals).expect("concat0");
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(v, Op::Concat0(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn slice0(self, lo: usize, hi: usize) -> Self {
        let v = self.value().slice_batch(lo, hi);
        self.graph.unary_node(self.id, v, Op::Slice0 { x: self.id, lo })
    }

    /// `x + strength * noise` with `noise: [H, W]` shared by all samples and
    /// channels and `strength: [1]`.
    pub fn add_noise(self, noise: Self, strength: Self) -> Self {
        let (xv, nv, sv) = (self.value(), noise.value(), strength.value());
        let plane = nv.len();
        assert_eq!(xv.dim(2) * xv.dim(3), plane, "noise plane size");
        let s = sv.item();
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(plane) {
            for (v, &n) in chunk.iter_mut().zip(nv.data()) {
                *v += s * n;
            }
        }
        let rg = self.requires_grad() || strength.requires_grad();
        self.graph.push(
            Tensor::new_unchecked(xv.shape().to_vec(), out),
            Op::AddNoise { x: self.id, noise: noise.id, strength: strength.id },
            rg,
        )
    }

    /// Scales each `[b, :, spatial]` fibre to unit norm: `x / sqrt(Σ_c x² + eps)`.
    pub fn normalize1(self, eps: f64) -> Self {
        let eps = T::lit(eps);
        let v = normalize1_forward(&self.value(), eps);
        self.graph.unary_node(self.id, v, Op::Normalize1 { x: self.id, eps })
    }
}

impl<'g, T: Scalar> std::ops::Add for Var<'g, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Sub for Var<'g, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Mul for Var<'g, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Neg for Var<'g, T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}
