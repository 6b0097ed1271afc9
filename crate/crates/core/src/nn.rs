//! Layer descriptions shared by every network. A layer only knows its
//! parameter names and shapes; values live in a [`ParamStore`].

use rand::Rng;
use sfe_tensor::{Bound, ParamStore, Scalar, Tensor, Var};

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self { name: name.into(), fan_in, fan_out }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Weights `N(0, gain² / fan_in)`, bias filled with `bias`.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, gain: f64, bias: f64) {
        let std = gain / (self.fan_in as f64).sqrt();
        store.insert(self.w(), Tensor::randn(&[self.fan_out, self.fan_in], std, rng));
        store.insert(self.b(), Tensor::full(&[self.fan_out], T::lit(bias)));
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(self.w(), Tensor::zeros(&[self.fan_out, self.fan_in]));
        store.insert(self.b(), Tensor::zeros(&[self.fan_out]));
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(p.get(&self.w()), Some(p.get(&self.b())))
    }
}

/// Square convolution with "same" padding and a per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, k, stride }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, gain: f64) {
        let std = gain / ((self.cin * self.k * self.k) as f64).sqrt();
        store.insert(self.w(), Tensor::randn(&[self.cout, self.cin, self.k, self.k], std, rng));
        store.insert(self.b(), Tensor::zeros(&[self.cout]));
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(self.w(), Tensor::zeros(&[self.cout, self.cin, self.k, self.k]));
        store.insert(self.b(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.get(&self.w()), self.stride, self.k / 2).add_channel_bias(p.get(&self.b()))
    }
}

/// He gain for leaky ReLU.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt()
}

/// Residual block: `skip(x) + conv2(lrelu(conv1(x)))`, where `conv1`
/// carries the stride and `skip` is a strided 1×1 convolution when the
/// shape changes, identity otherwise.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let skip = (cin != cout || stride != 1).then(|| Conv::new(format!("{name}.skip"), cin, cout, 1, stride));
        Self {
            conv1: Conv::new(format!("{name}.c1"), cin, cout, 3, stride),
            conv2: Conv::new(format!("{name}.c2"), cout, cout, 3, 1),
            skip,
        }
    }

    pub fn cin(&self) -> usize {
        self.conv1.cin
    }

    pub fn cout(&self) -> usize {
        self.conv1.cout
    }

    /// `residual_gain` scales the second conv's init so deep stacks start
    /// close to their skip path.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, residual_gain: f64) {
        self.conv1.init(store, rng, lrelu_gain());
        self.conv2.init(store, rng, residual_gain);
        if let Some(s) = &self.skip {
            s.init(store, rng, 1.0);
        }
    }

    /// Like [`ResBlock::init`] but the residual branch's last conv starts at
    /// zero, so the block starts as its skip path.
    pub fn init_zero_residual<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng, lrelu_gain());
        self.conv2.init_zero(store);
        if let Some(s) = &self.skip {
            s.init(store, rng, 1.0);
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.conv1.forward(p, x).leaky_relu(LRELU_SLOPE);
        let h = self.conv2.forward(p, h);
        let s = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x,
        };
        s + h
    }
}

/// A chain of residual blocks; the first may change channels and stride.
#[derive(Debug, Clone)]
pub struct ResStack {
    pub blocks: Vec<ResBlock>,
}

impl ResStack {
    pub fn new(name: &str, cin: usize, cout: usize, n: usize, first_stride: usize) -> Self {
        let blocks = (0..n)
            .map(|i| {
                let (ci, st) = if i == 0 { (cin, first_stride) } else { (cout, 1) };
                ResBlock::new(&format!("{name}.{i}"), ci, cout, st)
            })
            .collect();
        Self { blocks }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, residual_gain: f64) {
        for b in &self.blocks {
            b.init(store, rng, residual_gain);
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, mut x: Var<'g, T>) -> Var<'g, T> {
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        x
    }

    /// Number of convolutions on the longest path.
    pub fn depth(&self) -> usize {
        2 * self.blocks.len()
    }
}
