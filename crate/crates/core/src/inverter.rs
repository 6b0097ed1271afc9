//! The Inverter: a four-stage residual backbone whose pooled stage
//! features predict a W+ latent, a feature predictor on one stage map
//! predicting `F_pred`, and a Fuser merging `F_pred` with the generator's
//! own layer-`k` features `F_w = G(w_{0:k})`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{invalid, CoreError, Result};
use crate::nn::{lrelu_gain, Conv, Linear, ResStack, LRELU_SLOPE};
use crate::stylegen::{layer_resolution, FeatureTensor, Generator, WPlusLatent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverterConfig {
    /// Splice layer.
    pub k: usize,
    pub backbone_stage_channels: [usize; 4],
    pub backbone_strides: [usize; 4],
    pub blocks_per_stage: usize,
    /// 1-based stage whose output feeds the feature predictor.
    pub feature_tap_stage: usize,
    pub predictor_blocks: usize,
    pub fuser_blocks: usize,
    /// Hidden width of the Fuser; defaults to the layer-`k` channel count.
    pub fuser_channels: Option<usize>,
    pub w_head_hidden: usize,
    pub init_seed: u64,
}

impl Default for InverterConfig {
    fn default() -> Self {
        Self {
            k: 5,
            backbone_stage_channels: [32, 48, 64, 96],
            backbone_strides: [2, 2, 1, 2],
            blocks_per_stage: 2,
            feature_tap_stage: 3,
            predictor_blocks: 2,
            fuser_blocks: 6,
            fuser_channels: None,
            w_head_hidden: 256,
            init_seed: 0,
        }
    }
}

impl InverterConfig {
    /// Spatial size of each backbone stage for an `input`-pixel image.
    pub fn stage_resolutions(&self, input: usize) -> [usize; 4] {
        let mut r = input;
        self.backbone_strides.map(|s| {
            r /= s;
            r
        })
    }

    pub fn validate(&self, g: &crate::stylegen::GeneratorConfig) -> Result<()> {
        let n = g.num_layers();
        if self.k + 1 >= n {
            return Err(CoreError::Config(format!("inverter k = {} must be below N - 1 = {}", self.k, n - 1)));
        }
        if !(1..=4).contains(&self.feature_tap_stage) {
            return Err(CoreError::Config("feature_tap_stage must be in 1..=4".into()));
        }
        if self.backbone_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(CoreError::Config("backbone strides must be 1 or 2".into()));
        }
        if self.backbone_stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage == 0 || self.w_head_hidden == 0 {
            return Err(CoreError::Config("inverter sizes must be positive".into()));
        }
        let tap = self.stage_resolutions(g.image_resolution)[self.feature_tap_stage - 1];
        if tap != layer_resolution(self.k) {
            return Err(CoreError::Config(format!(
                "backbone stage {} is {tap}×{tap} but layer {} is {}×{}; adjust backbone_strides",
                self.feature_tap_stage,
                self.k,
                layer_resolution(self.k),
                layer_resolution(self.k)
            )));
        }
        Ok(())
    }
}

/// Graph outputs of one inversion.
pub struct InverterOut<'g, T: Scalar> {
    pub w: Var<'g, T>,
    pub f_k: Var<'g, T>,
    pub f_pred: Var<'g, T>,
    pub f_w: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Inverter<T: Scalar> {
    pub config: InverterConfig,
    pub params: ParamStore<T>,
    /// `false` in the no-Fuser ablation: `F_k = F_pred`.
    pub fuse: bool,
    num_layers: usize,
    style_dim: usize,
    c_k: usize,
}

struct Layout {
    stem: Conv,
    stages: Vec<ResStack>,
    w_hidden: Linear,
    w_out: Linear,
    predictor: ResStack,
    predictor_out: Conv,
    fuser: ResStack,
    fuser_out: Conv,
}

impl<T: Scalar> Inverter<T> {
    pub fn new(config: InverterConfig, g: &crate::stylegen::GeneratorConfig, fuse: bool) -> Result<Self> {
        config.validate(g)?;
        let inv = Self {
            c_k: g.layer_channels(config.k),
            num_layers: g.num_layers(),
            style_dim: g.style_dim,
            config,
            params: ParamStore::new(),
            fuse,
        };
        let l = inv.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(inv.config.init_seed ^ 0x1A7);
        let mut params = ParamStore::new();
        l.stem.init(&mut params, &mut rng, lrelu_gain());
        for s in &l.stages {
            s.init(&mut params, &mut rng, 0.5);
        }
        l.w_hidden.init(&mut params, &mut rng, lrelu_gain(), 0.0);
        l.w_out.init_zero(&mut params);
        l.predictor.init(&mut params, &mut rng, 0.5);
        l.predictor_out.init(&mut params, &mut rng, 1.0);
        if fuse {
            l.fuser.init(&mut params, &mut rng, 0.5);
            l.fuser_out.init_zero(&mut params);
        }
        Ok(Self { params, ..inv })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn feature_channels(&self) -> usize {
        self.c_k
    }

    fn layout(&self) -> Layout {
        let c = &self.config;
        let ch = c.backbone_stage_channels;
        let stages = (0..4)
            .map(|i| {
                let cin = if i == 0 { ch[0] } else { ch[i - 1] };
                ResStack::new(&format!("inv.s{i}"), cin, ch[i], c.blocks_per_stage, c.backbone_strides[i])
            })
            .collect();
        let tap = ch[c.feature_tap_stage - 1];
        let hid = c.fuser_channels.unwrap_or(self.c_k);
        Layout {
            stem: Conv::new("inv.stem", 3, ch[0], 3, 1),
            stages,
            w_hidden: Linear::new("inv.w.hidden", ch.iter().sum(), c.w_head_hidden),
            w_out: Linear::new("inv.w.out", c.w_head_hidden, self.num_layers * self.style_dim),
            predictor: ResStack::new("inv.fp", tap, tap, c.predictor_blocks, 1),
            predictor_out: Conv::new("inv.fp.out", tap, self.c_k, 1, 1),
            fuser: ResStack::new("inv.fus", 2 * self.c_k, hid, c.fuser_blocks, 1),
            fuser_out: Conv::new("inv.fus.out", hid, self.c_k, 1, 1),
        }
    }

    /// The four stage maps.
    pub fn backbone_features<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let l = self.layout();
        let mut h = l.stem.forward(p, x).leaky_relu(LRELU_SLOPE);
        l.stages
            .iter()
            .map(|s| {
                h = s.forward(p, h);
                h
            })
            .collect()
    }

    /// Pools every stage map, concatenates and maps to `[B, N, D]`.
    pub fn predict_wplus<'g>(&self, p: &Bound<'g, '_, T>, feats: &[Var<'g, T>], w_avg: Var<'g, T>) -> Var<'g, T> {
        let l = self.layout();
        let b = feats[0].dim(0);
        let (n, d) = (self.num_layers, self.style_dim);
        let pooled: Vec<_> = feats.iter().map(|f| f.leaky_relu(LRELU_SLOPE).global_avg_pool()).collect();
        let h = l.w_hidden.forward(p, Var::concat1(&pooled)).leaky_relu(LRELU_SLOPE);
        let offsets = l.w_out.forward(p, h).reshape(&[b, n, d]);
        let avg = w_avg.reshape(&[1, 1, d]);
        offsets + Var::concat1(&vec![avg; n]).broadcast_batch(b)
    }

    pub fn predict_feature<'g>(&self, p: &Bound<'g, '_, T>, tap: Var<'g, T>) -> Var<'g, T> {
        let l = self.layout();
        let h = l.predictor.forward(p, tap).leaky_relu(LRELU_SLOPE);
        l.predictor_out.forward(p, h)
    }

    /// `F_k = F_w + R(F_pred ‖ F_w)` with a zero-initialized output layer,
    /// or `F_pred` when fusion is disabled.
    pub fn fuse<'g>(&self, p: &Bound<'g, '_, T>, f_pred: Var<'g, T>, f_w: Var<'g, T>) -> Var<'g, T> {
        if !self.fuse {
            return f_pred;
        }
        let l = self.layout();
        let h = l.fuser.forward(p, Var::concat1(&[f_pred, f_w])).leaky_relu(LRELU_SLOPE);
        f_w + l.fuser_out.forward(p, h)
    }

    /// Full inversion on a graph; `pg` binds the frozen generator.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g, '_, T>,
        pg: &Bound<'g, '_, T>,
        gen: &Generator<T>,
        x: Var<'g, T>,
    ) -> InverterOut<'g, T> {
        let feats = self.backbone_features(p, x);
        let w = self.predict_wplus(p, &feats, pg.get("w_avg"));
        let f_pred = self.predict_feature(p, feats[self.config.feature_tap_stage - 1]);
        let f_w = gen.forward_partial(pg, w, self.k());
        let f_k = self.fuse(p, f_pred, f_w);
        InverterOut { w, f_k, f_pred, f_w }
    }

    fn check_gen(&self, gen: &Generator<T>) -> Result<()> {
        if gen.num_layers() != self.num_layers
            || gen.style_dim() != self.style_dim
            || gen.config.layer_channels(self.k()) != self.c_k
        {
            return Err(CoreError::Incompatible("inverter was built for a different generator".into()));
        }
        Ok(())
    }

    /// `(w, F_k)` for each image.
    pub fn invert(&self, gen: &Generator<T>, images: &Tensor<T>) -> Result<(WPlusLatent<T>, FeatureTensor<T>)> {
        self.check_gen(gen)?;
        let r = gen.resolution();
        if images.ndim() != 4 || images.shape()[1..] != [3, r, r] {
            return Err(CoreError::Shape(format!("inverter expects [B, 3, {r}, {r}], got {:?}", images.shape())));
        }
        let (mut ws, mut fs) = (Vec::new(), Vec::new());
        let n = images.dim(0);
        let mut lo = 0;
        while lo < n {
            let hi = (lo + 32).min(n);
            let g = Graph::new();
            let p = Bound::new(&g, &self.params, false);
            let pg = Bound::new(&g, &gen.params, false);
            let out = self.forward(&p, &pg, gen, g.constant(images.slice_batch(lo, hi)));
            ws.push(out.w.tensor());
            fs.push(out.f_k.tensor());
            lo = hi;
        }
        Ok((WPlusLatent::new(Tensor::cat_batch(&ws)?)?, FeatureTensor::new(Tensor::cat_batch(&fs)?, self.k())?))
    }

    /// Checked tensor-level fusion.
    pub fn fuse_tensors(&self, f_pred: &FeatureTensor<T>, f_w: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
        if f_pred.layer != self.k() || f_w.layer != self.k() {
            return invalid(format!("fusion happens at layer {}, got {} and {}", self.k(), f_pred.layer, f_w.layer));
        }
        if f_pred.values.shape() != f_w.values.shape() || f_pred.values.dim(1) != self.c_k {
            return Err(CoreError::Shape(format!(
                "fuser inputs {:?} and {:?} must match with {} channels",
                f_pred.values.shape(),
                f_w.values.shape(),
                self.c_k
            )));
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        FeatureTensor::new(self.fuse(&p, g.constant(f_pred.values.clone()), g.constant(f_w.values.clone())).tensor(), self.k())
    }

    /// Checked feature prediction from a stage map at layer `k`'s resolution.
    pub fn predict_feature_tensor(&self, tap: &Tensor<T>) -> Result<FeatureTensor<T>> {
        let s = layer_resolution(self.k());
        let c = self.config.backbone_stage_channels[self.config.feature_tap_stage - 1];
        if tap.ndim() != 4 || tap.shape()[1..] != [c, s, s] {
            return Err(CoreError::Shape(format!("feature predictor expects [B, {c}, {s}, {s}], got {:?}", tap.shape())));
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        FeatureTensor::new(self.predict_feature(&p, g.constant(tap.clone())).tensor(), self.k())
    }

    pub fn backbone_tensors(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if images.ndim() != 4 || images.dim(1) != 3 {
            return Err(CoreError::Shape(format!("expected [B, 3, H, W], got {:?}", images.shape())));
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        Ok(self.backbone_features(&p, g.constant(images.clone())).iter().map(|v| v.tensor()).collect())
    }
}
