//! Style-based generator with spliceable intermediate layers.
//!
//! Layer `k` runs at resolution `4 · 2^⌊k/2⌋`: layer 0 convolves a learned
//! constant, every even layer after it upsamples first. Each layer is a
//! modulated, demodulated 3×3 convolution followed by a fixed noise buffer
//! with learned strength, a bias and a leaky ReLU. A single modulated 1×1
//! head reads the last layer with the last style row and ends in `tanh`.
//!
//! Because the image head only depends on the last feature map and the last
//! style row, `synthesize_from(synthesize_partial(w, k), w[k+1..])` runs
//! exactly the same arithmetic as `synthesize(w)`.

mod disc;
mod pretrain;

pub use disc::Discriminator;
pub use pretrain::{pretrain_gan, GanOutcome, GanState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{invalid, CoreError, Result};
use crate::nn::{Linear, LRELU_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub style_dim: usize,
    /// Channels at resolutions up to 16; halved per doubling above that.
    pub base_channels: usize,
    pub image_resolution: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mult: f64,
    /// Seed for initial weights and the fixed noise buffers.
    pub init_seed: u64,
    pub pretrain: GanTrainConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            style_dim: 128,
            base_channels: 64,
            image_resolution: 64,
            mapping_layers: 4,
            mapping_lr_mult: 0.01,
            init_seed: 0,
            pretrain: GanTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// R1 weight γ in `γ/2 · E‖∇D(x)‖²`.
    pub r1_gamma: f64,
    /// Apply R1 every this many steps, scaled up accordingly.
    pub r1_interval: usize,
    pub ema_decay: f64,
    /// Mapped samples used to estimate the mean style vector.
    pub w_avg_samples: usize,
    /// Toy-FID the finished generator must reach.
    pub fid_threshold: f64,
    pub fid_samples: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 16,
            lr: 0.002,
            r1_gamma: 1.0,
            r1_interval: 4,
            ema_decay: 0.995,
            w_avg_samples: 20_000,
            fid_threshold: 25.0,
            fid_samples: 500,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

/// Spatial size of generator layer `k`.
pub fn layer_resolution(k: usize) -> usize {
    4 << (k / 2)
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        crate::toyworld::check_resolution(self.image_resolution)?;
        if self.style_dim == 0 || self.base_channels == 0 || self.mapping_layers == 0 {
            return Err(CoreError::Config("generator sizes must be positive".into()));
        }
        if !(self.mapping_lr_mult > 0.0) {
            return Err(CoreError::Config("mapping_lr_mult must be positive".into()));
        }
        Ok(())
    }

    /// Number of style-modulated layers `N`.
    pub fn num_layers(&self) -> usize {
        2 * (self.image_resolution / 4).trailing_zeros() as usize + 2
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        (self.base_channels * 16 / resolution).clamp(4, self.base_channels)
    }

    /// Output channels of layer `k`.
    pub fn layer_channels(&self, k: usize) -> usize {
        self.channels_at(layer_resolution(k))
    }

    fn layer_in_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.layer_channels(0)
        } else {
            self.layer_channels(k - 1)
        }
    }

    /// The fields that determine parameter shapes.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.style_dim == other.style_dim
            && self.base_channels == other.base_channels
            && self.image_resolution == other.image_resolution
            && self.mapping_layers == other.mapping_layers
    }
}

/// Per-layer styles, `[B, N, style_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WPlusLatent<T: Scalar> {
    rows: Tensor<T>,
}

impl<T: Scalar> WPlusLatent<T> {
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        if rows.ndim() != 3 {
            return Err(CoreError::Shape(format!("W+ latent must be [B, N, D], got {:?}", rows.shape())));
        }
        if !rows.all_finite() {
            return invalid("W+ latent has non-finite entries");
        }
        Ok(Self { rows })
    }

    /// Repeats each `[D]` row of `w: [B, D]` for all `n` layers.
    pub fn broadcast(w: &Tensor<T>, n: usize) -> Result<Self> {
        if w.ndim() != 2 {
            return Err(CoreError::Shape(format!("w must be [B, D], got {:?}", w.shape())));
        }
        let (b, d) = (w.dim(0), w.dim(1));
        let mut data = Vec::with_capacity(b * n * d);
        for i in 0..b {
            for _ in 0..n {
                data.extend_from_slice(&w.data()[i * d..(i + 1) * d]);
            }
        }
        Self::new(Tensor::from_vec(&[b, n, d], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.rows
    }

    pub fn batch(&self) -> usize {
        self.rows.dim(0)
    }

    pub fn num_layers(&self) -> usize {
        self.rows.dim(1)
    }

    pub fn style_dim(&self) -> usize {
        self.rows.dim(2)
    }

    /// Rows `lo..hi` of every sample.
    pub fn rows(&self, lo: usize, hi: usize) -> Tensor<T> {
        let (b, n, d) = (self.batch(), self.num_layers(), self.style_dim());
        let mut data = Vec::with_capacity(b * (hi - lo) * d);
        for i in 0..b {
            data.extend_from_slice(&self.rows.data()[(i * n + lo) * d..(i * n + hi) * d]);
        }
        Tensor::from_vec(&[b, hi - lo, d], data).expect("row slice")
    }

    /// Rows after splice layer `k`.
    pub fn tail(&self, k: usize) -> Tensor<T> {
        self.rows(k + 1, self.num_layers())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { rows: self.rows.select_batch(idx) }
    }
}

/// Activation of generator layer `layer`, `[B, C, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T: Scalar> {
    pub values: Tensor<T>,
    pub layer: usize,
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn new(values: Tensor<T>, layer: usize) -> Result<Self> {
        if values.ndim() != 4 || values.dim(2) != layer_resolution(layer) || values.dim(3) != values.dim(2) {
            return Err(CoreError::Shape(format!(
                "layer {layer} features must be [B, C, {s}, {s}], got {:?}",
                values.shape(),
                s = layer_resolution(layer)
            )));
        }
        if !values.all_finite() {
            return invalid("feature tensor has non-finite entries");
        }
        Ok(Self { values, layer })
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
}

const NOISE_INIT: f64 = 0.0;

fn mapping_layer(c: &GeneratorConfig, i: usize) -> Linear {
    Linear::new(format!("map.{i}"), c.style_dim, c.style_dim)
}

/// Style affine of layer `k`; its bias starts at 1 so styles start near 1.
fn affine(c: &GeneratorConfig, k: usize) -> Linear {
    Linear::new(format!("syn.{k}.affine"), c.style_dim, c.layer_in_channels(k))
}

fn rgb_affine(c: &GeneratorConfig) -> Linear {
    Linear::new("rgb.affine", c.style_dim, c.layer_channels(c.num_layers() - 1))
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let d = config.style_dim;
        for i in 0..config.mapping_layers {
            mapping_layer(&config, i).init(&mut params, &mut rng, crate::nn::lrelu_gain(), 0.0);
        }
        let c0 = config.layer_channels(0);
        params.insert("syn.const", Tensor::randn(&[1, c0, 4, 4], 1.0, &mut rng));
        for k in 0..config.num_layers() {
            let (cin, cout) = (config.layer_in_channels(k), config.layer_channels(k));
            let res = layer_resolution(k);
            affine(&config, k).init(&mut params, &mut rng, 1.0, 1.0);
            params.insert(format!("syn.{k}.weight"), Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut rng));
            params.insert(format!("syn.{k}.bias"), Tensor::zeros(&[cout]));
            params.insert(format!("syn.{k}.noise"), Tensor::randn(&[res, res], 1.0, &mut rng));
            params.insert(format!("syn.{k}.noise_strength"), Tensor::full(&[1], T::lit(NOISE_INIT)));
        }
        let cl = config.layer_channels(config.num_layers() - 1);
        rgb_affine(&config).init(&mut params, &mut rng, 1.0, 1.0);
        params.insert("rgb.weight", Tensor::randn(&[3, cl, 1, 1], 1.0 / (cl as f64).sqrt(), &mut rng));
        params.insert("rgb.bias", Tensor::zeros(&[3]));
        params.insert("w_avg", Tensor::zeros(&[d]));
        Ok(Self { config, params })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    pub fn resolution(&self) -> usize {
        self.config.image_resolution
    }

    /// Mean mapped style vector, `[D]`.
    pub fn w_avg(&self) -> &Tensor<T> {
        self.params.get("w_avg").expect("w_avg buffer")
    }

    /// `w_avg` repeated for every layer of a batch of `b`.
    pub fn w_avg_plus(&self, b: usize) -> WPlusLatent<T> {
        let w = self.w_avg().reshaped(&[1, self.style_dim()]).expect("w_avg shape");
        let one = WPlusLatent::broadcast(&w, self.num_layers()).expect("broadcast");
        one.select(&vec![0; b])
    }

    /// Parameter names updated by training; buffers excluded.
    pub fn is_buffer(name: &str) -> bool {
        name == "w_avg" || name.ends_with(".noise")
    }

    // Graph-level pieces ------------------------------------------------

    pub fn forward_mapping<'g>(&self, p: &Bound<'g, '_, T>, z: Var<'g, T>) -> Var<'g, T> {
        let mut x = z.normalize1(1e-8).scale(T::lit((self.style_dim() as f64).sqrt()));
        for i in 0..self.config.mapping_layers {
            x = mapping_layer(&self.config, i).forward(p, x).leaky_relu(LRELU_SLOPE);
        }
        x
    }

    /// Modulated convolution of `x` with style `s: [B, Cin]`.
    pub fn modulated_conv<'g>(x: Var<'g, T>, s: Var<'g, T>, weight: Var<'g, T>, demodulate: bool) -> Var<'g, T> {
        let wshape = weight.shape();
        let (cout, cin, kk) = (wshape[0], wshape[1], wshape[2] * wshape[3]);
        let y = x.mul_channel(s).conv2d(weight, 1, wshape[2] / 2);
        if !demodulate {
            return y;
        }
        // Σ_{kh,kw} W² as [Cout, Cin], then d = rsqrt(s² · W²ᵀ).
        let w2 = weight.square().reshape(&[cout * cin, kk]).sum_inner(kk).reshape(&[cout, cin]);
        let d = s.square().matmul(w2.transpose()).rsqrt(1e-8);
        y.mul_channel(d)
    }

    fn style_row<'g>(w: Var<'g, T>, i: usize) -> Var<'g, T> {
        let (b, d) = (w.dim(0), w.dim(2));
        w.slice1(i, i + 1).reshape(&[b, d])
    }

    fn layer<'g>(&self, p: &Bound<'g, '_, T>, k: usize, x: Option<Var<'g, T>>, style: Var<'g, T>) -> Var<'g, T> {
        let b = style.dim(0);
        let x = match (k, x) {
            (0, _) => p.get("syn.const").broadcast_batch(b),
            (_, Some(x)) if k % 2 == 0 => x.upsample2x(),
            (_, Some(x)) => x,
            (_, None) => panic!("layer {k} needs an input"),
        };
        let s = affine(&self.config, k).forward(p, style);
        let y = Self::modulated_conv(x, s, p.get(&format!("syn.{k}.weight")), true);
        y.add_noise(p.get(&format!("syn.{k}.noise")), p.get(&format!("syn.{k}.noise_strength")))
            .add_channel_bias(p.get(&format!("syn.{k}.bias")))
            .leaky_relu(LRELU_SLOPE)
            .scale(T::lit(std::f64::consts::SQRT_2))
    }

    fn to_rgb<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>, style: Var<'g, T>) -> Var<'g, T> {
        let s = rgb_affine(&self.config).forward(p, style);
        Self::modulated_conv(x, s, p.get("rgb.weight"), false).add_channel_bias(p.get("rgb.bias")).tanh()
    }

    /// Runs layers `lo..=hi`, reading styles from `w: [B, rows, D]` whose
    /// row 0 belongs to layer `row0`. Calls `tap` with every layer output.
    fn run<'g>(
        &self,
        p: &Bound<'g, '_, T>,
        mut x: Option<Var<'g, T>>,
        w: Var<'g, T>,
        row0: usize,
        lo: usize,
        hi: usize,
        mut tap: impl FnMut(usize, Var<'g, T>),
    ) -> Var<'g, T> {
        for k in lo..=hi {
            let y = self.layer(p, k, x, Self::style_row(w, k - row0));
            tap(k, y);
            x = Some(y);
        }
        x.expect("at least one layer")
    }

    /// Features of layer `k` from `w: [B, N, D]` (only rows `0..=k` are read).
    pub fn forward_partial<'g>(&self, p: &Bound<'g, '_, T>, w: Var<'g, T>, k: usize) -> Var<'g, T> {
        self.run(p, None, w, 0, 0, k, |_, _| {})
    }

    /// Image from layer-`k` features and the `N - k - 1` rows after `k`.
    pub fn forward_from<'g>(&self, p: &Bound<'g, '_, T>, f: Var<'g, T>, k: usize, w_tail: Var<'g, T>) -> Var<'g, T> {
        let n = self.num_layers();
        let x = if k + 1 < n { self.run(p, Some(f), w_tail, k + 1, k + 1, n - 1, |_, _| {}) } else { f };
        self.to_rgb(p, x, Self::style_row(w_tail, w_tail.dim(1) - 1))
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, w: Var<'g, T>) -> Var<'g, T> {
        self.forward_taps(p, w, &[]).0
    }

    /// Image plus the features of each layer in `taps`, from one pass.
    pub fn forward_taps<'g>(
        &self,
        p: &Bound<'g, '_, T>,
        w: Var<'g, T>,
        taps: &[usize],
    ) -> (Var<'g, T>, Vec<Var<'g, T>>) {
        let n = self.num_layers();
        let mut got: Vec<Option<Var<'g, T>>> = vec![None; taps.len()];
        let x = self.run(p, None, w, 0, 0, n - 1, |k, y| {
            for (slot, &t) in got.iter_mut().zip(taps) {
                if t == k {
                    *slot = Some(y);
                }
            }
        });
        let img = self.to_rgb(p, x, Self::style_row(w, n - 1));
        (img, got.into_iter().map(|v| v.expect("tap layer in range")).collect())
    }

    // Checked tensor-level operations ------------------------------------

    fn check_w(&self, w: &WPlusLatent<T>) -> Result<()> {
        if w.num_layers() != self.num_layers() || w.style_dim() != self.style_dim() {
            return Err(CoreError::Shape(format!(
                "W+ latent is [_, {}, {}], generator needs [_, {}, {}]",
                w.num_layers(),
                w.style_dim(),
                self.num_layers(),
                self.style_dim()
            )));
        }
        Ok(())
    }

    pub fn check_layer(&self, k: usize) -> Result<()> {
        if k >= self.num_layers() {
            return invalid(format!("layer {k} out of range 0..{}", self.num_layers()));
        }
        Ok(())
    }

    /// `z: [B, D] -> w: [B, D]`
    pub fn map_latent(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.ndim() != 2 || z.dim(1) != self.style_dim() {
            return Err(CoreError::Shape(format!("z must be [B, {}], got {:?}", self.style_dim(), z.shape())));
        }
        if !z.all_finite() {
            return invalid("z has non-finite entries");
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        Ok(self.forward_mapping(&p, g.constant(z.clone())).tensor())
    }

    /// Maps `n` standard normal draws.
    pub fn sample_w<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let z = Tensor::randn(&[n, self.style_dim()], 1.0, rng);
        self.map_latent(&z).expect("sampled z is valid")
    }

    pub fn synthesize(&self, w: &WPlusLatent<T>) -> Result<Tensor<T>> {
        self.check_w(w)?;
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        Ok(self.forward(&p, g.constant(w.tensor().clone())).tensor())
    }

    pub fn synthesize_partial(&self, w: &WPlusLatent<T>, k: usize) -> Result<FeatureTensor<T>> {
        self.check_w(w)?;
        self.check_layer(k)?;
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let f = self.forward_partial(&p, g.constant(w.tensor().clone()), k).tensor();
        Ok(FeatureTensor { values: f, layer: k })
    }

    /// `w_tail: [B, N - k - 1, D]` for `f` at layer `k < N - 1`.
    pub fn synthesize_from(&self, f: &FeatureTensor<T>, w_tail: &Tensor<T>) -> Result<Tensor<T>> {
        let k = f.layer;
        let n = self.num_layers();
        if k + 1 >= n {
            return invalid(format!("splice layer {k} leaves no tail rows (N = {n})"));
        }
        let c = self.config.layer_channels(k);
        let s = layer_resolution(k);
        let b = f.values.dim(0);
        if f.values.shape() != [b, c, s, s] {
            return Err(CoreError::Shape(format!(
                "layer {k} features must be [B, {c}, {s}, {s}], got {:?}",
                f.values.shape()
            )));
        }
        if w_tail.shape() != [b, n - k - 1, self.style_dim()] {
            return Err(CoreError::Shape(format!(
                "tail after layer {k} must be [{b}, {}, {}], got {:?}",
                n - k - 1,
                self.style_dim(),
                w_tail.shape()
            )));
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        Ok(self.forward_from(&p, g.constant(f.values.clone()), k, g.constant(w_tail.clone())).tensor())
    }

    /// Replaces `w_avg` with the mean of `n` mapped samples.
    pub fn estimate_w_avg(&mut self, n: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.style_dim();
        let mut acc = vec![0.0f64; d];
        let chunk = 500;
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let w = self.sample_w(m, &mut rng);
            for row in w.data().chunks(d) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            done += m;
        }
        let mean = acc.iter().map(|a| T::lit(a / n as f64)).collect();
        self.params.insert("w_avg", Tensor::from_vec(&[d], mean).expect("w_avg size"));
    }
}

/// Mapping-network parameters get a reduced learning rate.
pub const MAPPING_PREFIX: &str = "map.";
