//! The editable base encoder E: a strided residual backbone and two
//! zero-initialized heads producing `w_E(i) = w_avg + w_base + δ_i`. The
//! per-layer offsets `δ_i` are penalized so latents stay close to a single
//! shared row, which keeps them editable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::classifier::Classifier;
use crate::error::{CoreError, Result};
use crate::metrics::{MetricsLog, StepRecord};
use crate::nn::{lrelu_gain, Conv, Linear, ResBlock, LRELU_SLOPE};
use crate::objectives::{image_loss, Critic, LossWeights};
use crate::rng;
use crate::stylegen::{Generator, WPlusLatent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseEncoderConfig {
    pub backbone_stages: usize,
    /// Channels of the first stage; each later stage doubles them, up to 128.
    pub base_channels: usize,
    pub hidden: usize,
    /// Weight of `Σ_i ‖δ_i‖²`.
    pub editability_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for BaseEncoderConfig {
    fn default() -> Self {
        Self {
            backbone_stages: 4,
            base_channels: 16,
            hidden: 256,
            editability_weight: 0.01,
            steps: 3000,
            batch_size: 8,
            lr: 5e-4,
            init_seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl BaseEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_stages == 0 || self.base_channels == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("encoder_e sizes must be positive".into()));
        }
        if !(self.editability_weight >= 0.0) || !(self.lr > 0.0) {
            return Err(CoreError::Config("encoder_e needs editability_weight >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaseEncoder<T: Scalar> {
    pub config: BaseEncoderConfig,
    pub params: ParamStore<T>,
    resolution: usize,
    num_layers: usize,
    style_dim: usize,
}

struct Layout {
    stem: Conv,
    stages: Vec<ResBlock>,
    /// Average pools applied after the last stage to reach 4×4.
    pools: usize,
    hidden: Linear,
    base: Linear,
    offsets: Linear,
}

impl<T: Scalar> BaseEncoder<T> {
    /// An untrained encoder for latents of shape `[num_layers, style_dim]`.
    pub fn new(config: BaseEncoderConfig, resolution: usize, num_layers: usize, style_dim: usize) -> Result<Self> {
        config.validate()?;
        crate::toyworld::check_resolution(resolution)?;
        let e = Self { config, params: ParamStore::new(), resolution, num_layers, style_dim };
        let l = e.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(e.config.init_seed ^ 0xE4E);
        let mut params = ParamStore::new();
        l.stem.init(&mut params, &mut rng, lrelu_gain());
        for s in &l.stages {
            s.init(&mut params, &mut rng, 0.5);
        }
        l.hidden.init(&mut params, &mut rng, lrelu_gain(), 0.0);
        l.base.init_zero(&mut params);
        l.offsets.init_zero(&mut params);
        Ok(Self { params, ..e })
    }

    pub fn for_generator(config: BaseEncoderConfig, g: &Generator<T>) -> Result<Self> {
        Self::new(config, g.resolution(), g.num_layers(), g.style_dim())
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn layout(&self) -> Layout {
        let c = &self.config;
        let ch = |i: usize| (c.base_channels << i).min(128.max(c.base_channels));
        let mut res = self.resolution;
        let mut stages = Vec::new();
        let mut cin = ch(0);
        for i in 0..c.backbone_stages {
            let stride = if res > 4 { 2 } else { 1 };
            res /= stride;
            stages.push(ResBlock::new(&format!("e.s{i}"), cin, ch(i), stride));
            cin = ch(i);
        }
        let pools = (res / 4).trailing_zeros() as usize;
        let flat = cin * 16;
        let (n, d) = (self.num_layers, self.style_dim);
        Layout {
            stem: Conv::new("e.stem", 3, ch(0), 3, 1),
            stages,
            pools,
            hidden: Linear::new("e.hidden", flat, c.hidden),
            base: Linear::new("e.base", c.hidden, d),
            offsets: Linear::new("e.offsets", c.hidden, n * d),
        }
    }

    /// `x: [B, 3, R, R]` to `(w_E [B, N, D], δ [B, N, D])`; `w_avg: [D]`.
    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>, w_avg: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let l = self.layout();
        let b = x.dim(0);
        let (n, d) = (self.num_layers, self.style_dim);
        let mut h = l.stem.forward(p, x).leaky_relu(LRELU_SLOPE);
        for s in &l.stages {
            h = s.forward(p, h);
        }
        for _ in 0..l.pools {
            h = h.avg_pool2x2();
        }
        let flat = h.dim(1) * 16;
        let h = l.hidden.forward(p, h.leaky_relu(LRELU_SLOPE).reshape(&[b, flat])).leaky_relu(LRELU_SLOPE);
        let base = l.base.forward(p, h).add_broadcast(w_avg);
        let delta = l.offsets.forward(p, h).reshape(&[b, n, d]);
        let rows = base.reshape(&[b, 1, d]);
        let w = Var::concat1(&vec![rows; n]) + delta;
        (w, delta)
    }

    pub fn encode(&self, images: &Tensor<T>, w_avg: &Tensor<T>) -> Result<WPlusLatent<T>> {
        let r = self.resolution;
        if images.ndim() != 4 || images.shape()[1..] != [3, r, r] {
            return Err(CoreError::Shape(format!("encoder expects [B, 3, {r}, {r}], got {:?}", images.shape())));
        }
        if w_avg.shape() != [self.style_dim] {
            return Err(CoreError::Shape(format!("w_avg must be [{}]", self.style_dim)));
        }
        let mut parts = Vec::new();
        let n = images.dim(0);
        let mut lo = 0;
        while lo < n {
            let hi = (lo + 64).min(n);
            let g = Graph::new();
            let p = Bound::new(&g, &self.params, false);
            let (w, _) = self.forward(&p, g.constant(images.slice_batch(lo, hi)), g.constant(w_avg.clone()));
            parts.push(w.tensor());
            lo = hi;
        }
        WPlusLatent::new(Tensor::cat_batch(&parts)?)
    }
}

/// Mean over the batch of `Σ_i ‖δ_i‖²`.
pub fn offset_penalty<'g, T: Scalar>(delta: Var<'g, T>) -> Var<'g, T> {
    delta.square().sum_per_sample().mean()
}

/// Mean distance between distinct rows of each latent, averaged over the
/// batch. Small values mean the latent is close to a single `W` vector.
pub fn row_spread<T: Scalar>(w: &WPlusLatent<T>) -> f64 {
    let (b, n, d) = (w.batch(), w.num_layers(), w.style_dim());
    if n < 2 {
        return 0.0;
    }
    let data = w.tensor().data();
    let mut total = 0.0;
    for s in 0..b {
        let row = |i: usize| &data[(s * n + i) * d..(s * n + i + 1) * d];
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += row(i).iter().zip(row(j)).map(|(a, c)| (a.as_f64() - c.as_f64()).powi(2)).sum::<f64>().sqrt();
            }
        }
        total += acc / (n * (n - 1) / 2) as f64;
    }
    total / b.max(1) as f64
}

#[derive(Debug, Clone)]
pub struct EncoderState<T: Scalar> {
    pub net: BaseEncoder<T>,
    pub opt: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> EncoderState<T> {
    pub fn new(net: BaseEncoder<T>) -> Self {
        let lr = net.config.lr;
        Self { net, opt: Adam::new(AdamConfig::new(lr)), step: 0 }
    }
}

/// Trains E on real images against a frozen generator with the image loss
/// (no adversarial term) plus the offset penalty. `checkpoint` runs every
/// `checkpoint_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn train_base_encoder<T: Scalar>(
    st: &mut EncoderState<T>,
    g: &Generator<T>,
    critic: &Classifier<T>,
    weights: &LossWeights,
    images: &Tensor<T>,
    seed: u64,
    until: usize,
    log: &mut MetricsLog,
    mut checkpoint: impl FnMut(&EncoderState<T>) -> Result<()>,
) -> Result<()> {
    let n = images.dim(0);
    if n == 0 {
        return Err(CoreError::Invalid("encoder training needs images".into()));
    }
    let cfg = st.net.config.clone();
    while st.step < until {
        let mut rng = rng::stream(seed, "encoder_e", st.step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let x = images.select_batch(&idx);
        let graph = Graph::new();
        let pe = Bound::new(&graph, &st.net.params, true);
        let pg = Bound::new(&graph, &g.params, false);
        let c = Critic::new(&graph, critic);
        let xv = graph.constant(x);
        let (w, delta) = st.net.forward(&pe, xv, graph.constant(g.w_avg().clone()));
        let recon = g.forward(&pg, w);
        let parts = image_loss(c.terms(&c.target(xv), recon, None), weights);
        let pen = offset_penalty(delta);
        let loss = parts.total + pen.scale(T::lit(cfg.editability_weight));
        let lv = loss.item().as_f64();
        if !lv.is_finite() {
            return Err(CoreError::Diverged { step: st.step, what: format!("encoder_e loss = {lv}") });
        }
        let mut grads = graph.backward(loss);
        let grads = pe.grads(&mut grads);
        drop(pe);
        st.opt.step(&mut st.net.params, &grads);
        st.step += 1;
        if st.step % cfg.log_every.max(1) == 0 || st.step == until {
            let mut rec = StepRecord::new("encoder_e", st.step).with("loss", lv).with("offset_penalty", pen.item().as_f64());
            for (k, v) in parts.breakdown().entries() {
                rec = rec.with(k, v);
            }
            log.write(&rec)?;
        }
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < until {
            checkpoint(st)?;
        }
    }
    log.flush()
}
