//! The Feature Editor `H`, feature differences `Δ`, optional region masks,
//! the reducer for differences taken at a deeper layer than `k`, and the
//! full inversion / editing pipeline.

use std::path::Path;

use image::imageops::FilterType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::directions::{apply, EditingDirection};
use crate::encoder_w::BaseEncoder;
use crate::error::{invalid, CoreError, Result};
use crate::imageio::load_gray;
use crate::inverter::Inverter;
use crate::nn::{Conv, ResBlock, ResStack, LRELU_SLOPE};
use crate::stylegen::{layer_resolution, FeatureTensor, Generator, GeneratorConfig, WPlusLatent};

/// `Δ = F(w_E) − F(w_E′)` at `source_layer`, batched `[B, C, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMap<T: Scalar> {
    pub values: Tensor<T>,
    pub source_layer: usize,
    pub direction_name: String,
    pub power: f64,
}

/// Binary `[S, S]` mask at `F_k`'s resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    values: Vec<u8>,
    size: usize,
}

impl RegionMask {
    pub fn new(values: Vec<u8>, size: usize) -> Result<Self> {
        if values.len() != size * size {
            return Err(CoreError::Shape(format!("mask needs {} entries, got {}", size * size, values.len())));
        }
        if values.iter().any(|&v| v > 1) {
            return invalid("mask entries must be 0 or 1");
        }
        Ok(Self { values, size })
    }

    pub fn full(size: usize, on: bool) -> Self {
        Self { values: vec![u8::from(on); size * size], size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Reads a grayscale image: pixels ≥ 128 are inside, the result is
    /// area-averaged down to `size` and kept where at least half covered.
    pub fn from_image(path: &Path, size: usize) -> Result<Self> {
        let gray = load_gray(path)?;
        let (w, h) = gray.dimensions();
        if w != h || (w as usize) < size {
            return invalid(format!("mask image must be square and at least {size}×{size}, got {w}×{h}"));
        }
        let bin = image::GrayImage::from_fn(w, h, |x, y| image::Luma([if gray.get_pixel(x, y)[0] >= 128 { 255 } else { 0 }]));
        let small = if w as usize % size == 0 {
            let f = w as usize / size;
            let mut out = vec![0u8; size * size];
            for (i, o) in out.iter_mut().enumerate() {
                let (r, c) = (i / size, i % size);
                let mut on = 0usize;
                for y in r * f..(r + 1) * f {
                    for x in c * f..(c + 1) * f {
                        on += usize::from(bin.get_pixel(x as u32, y as u32)[0] > 0);
                    }
                }
                *o = u8::from(2 * on >= f * f);
            }
            out
        } else {
            let r = image::imageops::resize(&bin, size as u32, size as u32, FilterType::Triangle);
            r.pixels().map(|p| u8::from(p[0] >= 128)).collect()
        };
        Self::new(small, size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureEditorConfig {
    pub blocks: usize,
    /// Hidden width; defaults to the layer-`k` channel count.
    pub hidden_channels: Option<usize>,
    /// Layer whose features are differenced; defaults to `k`.
    pub source_layer: Option<usize>,
    pub init_seed: u64,
}

impl Default for FeatureEditorConfig {
    fn default() -> Self {
        Self { blocks: 6, hidden_channels: None, source_layer: None, init_seed: 0 }
    }
}

/// `H(F_k, Δ) = F_k + out(blocks(F_k ‖ Δ))`, with `out` starting at zero.
#[derive(Debug, Clone)]
pub struct FeatureEditor<T: Scalar> {
    pub config: FeatureEditorConfig,
    pub params: ParamStore<T>,
    k: usize,
    c_k: usize,
    source_layer: usize,
    c_src: usize,
}

struct Layout {
    body: ResStack,
    out: Conv,
    reducer: Vec<ResBlock>,
    reducer_out: Option<Conv>,
}

impl<T: Scalar> FeatureEditor<T> {
    pub fn new(config: FeatureEditorConfig, g: &GeneratorConfig, k: usize) -> Result<Self> {
        let n = g.num_layers();
        let source_layer = config.source_layer.unwrap_or(k);
        if k + 1 >= n {
            return Err(CoreError::Config(format!("editor layer k = {k} must be below N - 1 = {}", n - 1)));
        }
        if source_layer < k || source_layer + 1 >= n {
            return Err(CoreError::Config(format!(
                "Δ source layer {source_layer} must lie in {k}..{} (it cannot precede k)",
                n - 1
            )));
        }
        if config.blocks == 0 || config.hidden_channels == Some(0) {
            return Err(CoreError::Config("feature editor sizes must be positive".into()));
        }
        let h = Self {
            c_k: g.layer_channels(k),
            c_src: g.layer_channels(source_layer),
            k,
            source_layer,
            config,
            params: ParamStore::new(),
        };
        let l = h.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(h.config.init_seed ^ 0xED1);
        let mut params = ParamStore::new();
        l.body.init(&mut params, &mut rng, 0.5);
        l.out.init_zero(&mut params);
        for b in &l.reducer {
            b.init(&mut params, &mut rng, 0.5);
        }
        if let Some(o) = &l.reducer_out {
            o.init_zero(&mut params);
        }
        Ok(Self { params, ..h })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn source_layer(&self) -> usize {
        self.source_layer
    }

    fn layout(&self) -> Layout {
        let hid = self.config.hidden_channels.unwrap_or(self.c_k);
        let mut reducer = Vec::new();
        let mut reducer_out = None;
        if self.source_layer != self.k {
            let mut res = layer_resolution(self.source_layer);
            let target = layer_resolution(self.k);
            let mut c = self.c_src;
            let mut i = 0;
            loop {
                let stride = if res > target { 2 } else { 1 };
                reducer.push(ResBlock::new(&format!("fe.red.{i}"), c, self.c_k, stride));
                c = self.c_k;
                res /= stride;
                i += 1;
                if res == target {
                    break;
                }
            }
            reducer_out = Some(Conv::new("fe.red.out", self.c_k, self.c_k, 1, 1));
        }
        Layout {
            body: ResStack::new("fe.h", 2 * self.c_k, hid, self.config.blocks, 1),
            out: Conv::new("fe.h.out", hid, self.c_k, 1, 1),
            reducer,
            reducer_out,
        }
    }

    /// Maps a difference at the source layer to layer `k`; identity when
    /// they coincide.
    pub fn reduce_var<'g>(&self, p: &Bound<'g, '_, T>, delta: Var<'g, T>) -> Var<'g, T> {
        let l = self.layout();
        let Some(out) = l.reducer_out else { return delta };
        let mut h = delta;
        for b in &l.reducer {
            h = b.forward(p, h).leaky_relu(LRELU_SLOPE);
        }
        out.forward(p, h)
    }

    pub fn edit_var<'g>(&self, p: &Bound<'g, '_, T>, f_k: Var<'g, T>, delta_k: Var<'g, T>) -> Var<'g, T> {
        let l = self.layout();
        let h = l.body.forward(p, Var::concat1(&[f_k, delta_k])).leaky_relu(LRELU_SLOPE);
        f_k + l.out.forward(p, h)
    }

    /// Reduction then editing; `delta` is at the source layer.
    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, f_k: Var<'g, T>, delta: Var<'g, T>) -> Var<'g, T> {
        self.edit_var(p, f_k, self.reduce_var(p, delta))
    }

    fn check_delta(&self, d: &DeltaMap<T>, layer: usize, channels: usize) -> Result<()> {
        let s = layer_resolution(layer);
        if d.source_layer != layer || d.values.ndim() != 4 || d.values.shape()[1..] != [channels, s, s] {
            return Err(CoreError::Shape(format!(
                "Δ must come from layer {layer} as [B, {channels}, {s}, {s}], got layer {} {:?}",
                d.source_layer,
                d.values.shape()
            )));
        }
        Ok(())
    }

    pub fn reduce_delta(&self, delta: &DeltaMap<T>) -> Result<DeltaMap<T>> {
        if delta.source_layer < self.k {
            return invalid(format!("cannot reduce Δ from layer {} up to layer {}", delta.source_layer, self.k));
        }
        self.check_delta(delta, self.source_layer, self.c_src)?;
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let v = self.reduce_var(&p, g.constant(delta.values.clone())).tensor();
        Ok(DeltaMap { values: v, source_layer: self.k, ..delta.clone() })
    }

    /// `F_k′ = H(F_k, Δ)` with `Δ` already at layer `k`.
    pub fn edit_features(&self, f_k: &FeatureTensor<T>, delta: &DeltaMap<T>) -> Result<FeatureTensor<T>> {
        if f_k.layer != self.k || f_k.values.dim(1) != self.c_k {
            return Err(CoreError::Shape(format!("H edits layer {} with {} channels", self.k, self.c_k)));
        }
        self.check_delta(delta, self.k, self.c_k)?;
        if delta.values.dim(0) != f_k.values.dim(0) {
            return Err(CoreError::Shape("Δ and F_k batch sizes differ".into()));
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let v = self.edit_var(&p, g.constant(f_k.values.clone()), g.constant(delta.values.clone())).tensor();
        FeatureTensor::new(v, self.k)
    }
}

/// `Δ = F_L(w_a) − F_L(w_b)`.
pub fn delta_between<T: Scalar>(g: &Generator<T>, w_a: &WPlusLatent<T>, w_b: &WPlusLatent<T>, layer: usize) -> Result<Tensor<T>> {
    let fa = g.synthesize_partial(w_a, layer)?;
    let fb = g.synthesize_partial(w_b, layer)?;
    Ok(fa.values.sub(&fb.values))
}

pub fn compute_delta<T: Scalar>(
    g: &Generator<T>,
    w_e: &WPlusLatent<T>,
    d: &EditingDirection,
    power: f64,
    source_layer: usize,
) -> Result<DeltaMap<T>> {
    let edited = apply(w_e, d, power)?;
    Ok(DeltaMap {
        values: delta_between(g, w_e, &edited, source_layer)?,
        source_layer,
        direction_name: d.name.clone(),
        power,
    })
}

/// Zeroes `Δ` outside the mask, for every channel.
pub fn apply_mask<T: Scalar>(delta: &DeltaMap<T>, m: &RegionMask) -> Result<DeltaMap<T>> {
    let v = &delta.values;
    if v.ndim() != 4 || v.dim(2) != m.size || v.dim(3) != m.size {
        return Err(CoreError::Shape(format!("mask is {s}×{s} but Δ is {:?}", v.shape(), s = m.size)));
    }
    let mut out = v.clone();
    let plane = m.size * m.size;
    for chunk in out.data_mut().chunks_mut(plane) {
        for (x, &keep) in chunk.iter_mut().zip(&m.values) {
            if keep == 0 {
                *x = T::zero();
            }
        }
    }
    Ok(DeltaMap { values: out, ..delta.clone() })
}

/// Which parts of the pipeline run; the flags mirror the ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Take `Δ` from the inverter's latent instead of the base encoder's.
    pub no_e: bool,
    /// Skip `H`: `F_k′ = F_k`.
    pub no_h: bool,
}

/// Trained components wired for inference.
pub struct Pipeline<'a, T: Scalar> {
    pub generator: &'a Generator<T>,
    pub encoder: &'a BaseEncoder<T>,
    pub inverter: &'a Inverter<T>,
    pub editor: &'a FeatureEditor<T>,
    pub options: PipelineOptions,
}

/// An edit request: direction, power and optional mask.
#[derive(Clone, Copy)]
pub struct EditRequest<'r> {
    pub direction: &'r EditingDirection,
    pub power: f64,
    pub mask: Option<&'r RegionMask>,
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    pub fn check(&self) -> Result<()> {
        if self.inverter.k() != self.editor.k() {
            return Err(CoreError::Incompatible(format!(
                "inverter splices at layer {} but the editor at {}",
                self.inverter.k(),
                self.editor.k()
            )));
        }
        let g = self.generator;
        if self.encoder.num_layers() != g.num_layers() || self.encoder.style_dim() != g.style_dim() {
            return Err(CoreError::Incompatible("base encoder was built for a different generator".into()));
        }
        Ok(())
    }

    /// Reconstruction: the editing path with `Δ = 0` and `w′ = w`.
    pub fn invert_image(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, None)
    }

    pub fn edit_image(&self, x: &Tensor<T>, req: EditRequest<'_>) -> Result<Tensor<T>> {
        self.run(x, Some(req))
    }

    fn run(&self, x: &Tensor<T>, req: Option<EditRequest<'_>>) -> Result<Tensor<T>> {
        self.check()?;
        let g = self.generator;
        let (w, f_k) = self.inverter.invert(g, x)?;
        let l = self.editor.source_layer();
        let (w_edit, delta) = match req {
            None => {
                let s = layer_resolution(l);
                let zeros = Tensor::zeros(&[x.dim(0), g.config.layer_channels(l), s, s]);
                (w.clone(), DeltaMap { values: zeros, source_layer: l, direction_name: String::new(), power: 0.0 })
            }
            Some(r) => {
                let w_src = if self.options.no_e { w.clone() } else { self.encoder.encode(x, g.w_avg())? };
                let mut delta = compute_delta(g, &w_src, r.direction, r.power, l)?;
                if let Some(m) = r.mask {
                    // Masks describe layer-k resolution; apply after reduction.
                    if l == self.editor.k() {
                        delta = apply_mask(&delta, m)?;
                    }
                }
                (apply(&w, r.direction, r.power)?, delta)
            }
        };
        let f_edit = if self.options.no_h {
            f_k
        } else {
            let mut dk = if l == self.editor.k() { delta } else { self.editor.reduce_delta(&delta)? };
            if let (Some(m), true) = (req.and_then(|r| r.mask), l != self.editor.k()) {
                dk = apply_mask(&dk, m)?;
            }
            self.editor.edit_features(&f_k, &dk)?
        };
        g.synthesize_from(&f_edit, &w_edit.tail(self.editor.k()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directions::DirectionSource;
    use crate::encoder_w::BaseEncoderConfig;
    use crate::inverter::InverterConfig;
    use crate::rng;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use sfe_tensor::gradcheck;

    fn gcfg() -> GeneratorConfig {
        GeneratorConfig { style_dim: 8, base_channels: 8, image_resolution: 32, mapping_layers: 1, ..Default::default() }
    }

    fn small_editor(k: usize, source: Option<usize>) -> FeatureEditor<f64> {
        let cfg = FeatureEditorConfig { blocks: 2, hidden_channels: Some(6), source_layer: source, init_seed: 1 };
        FeatureEditor::new(cfg, &gcfg(), k).unwrap()
    }

    fn perturb(store: &mut ParamStore<f64>, prefix: &str, seed: u64) {
        let mut r = rng::derived(seed, "perturb");
        for name in store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect::<Vec<_>>() {
            let t = store.get(&name).unwrap();
            let noise = Tensor::randn(t.shape(), 0.3, &mut r);
            store.insert(name, t.add(&noise));
        }
    }

    fn direction(d: usize, seed: u64) -> EditingDirection {
        let mut r = rng::derived(seed, "dir");
        EditingDirection::new("x+", Tensor::<f64>::randn(&[d], 1.0, &mut r).data().to_vec(), DirectionSource::Probe).unwrap()
    }

    #[test]
    fn delta_zero_power_and_antisymmetry() {
        let g = Generator::<f64>::new(gcfg()).unwrap();
        let mut r = rng::derived(0, "w");
        let w = WPlusLatent::broadcast(&g.sample_w(2, &mut r), g.num_layers()).unwrap();
        let d = direction(8, 1);
        let z = compute_delta(&g, &w, &d, 0.0, 5).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.values.shape(), &[2, g.config.layer_channels(5), 16, 16]);
        let w2 = apply(&w, &d, 1.5).unwrap();
        let ab = delta_between(&g, &w, &w2, 5).unwrap();
        let ba = delta_between(&g, &w2, &w, 5).unwrap();
        assert!(ab.data().iter().zip(ba.data()).all(|(a, b)| *a == -*b));
        assert!(ab.max_abs() > 0.0);
        assert!(compute_delta(&g, &w, &d, 1.0, g.num_layers()).is_err());
    }

    #[test]
    fn reducer_contract() {
        let g = gcfg();
        let h = small_editor(3, Some(5));
        let c5 = g.layer_channels(5);
        let zero = DeltaMap { values: Tensor::zeros(&[2, c5, 16, 16]), source_layer: 5, direction_name: "x".into(), power: 1.0 };
        let out = h.reduce_delta(&zero).unwrap();
        assert_eq!(out.values.shape(), &[2, g.layer_channels(3), 8, 8]);
        assert_eq!(out.source_layer, 3);
        assert!(out.values.max_abs() <= 1e-6);
        let mut r = rng::derived(2, "d");
        let rand = DeltaMap { values: Tensor::randn(&[2, c5, 16, 16], 1.0, &mut r), ..zero.clone() };
        assert!(h.reduce_delta(&rand).unwrap().values.max_abs() <= 1e-6);
        // Passthrough when the source is k itself.
        let id = small_editor(5, None);
        let same = id.reduce_delta(&rand).unwrap();
        assert_eq!(same.values, rand.values);
        assert!(FeatureEditor::<f64>::new(FeatureEditorConfig { source_layer: Some(2), ..Default::default() }, &g, 3).is_err());
        let early = DeltaMap { source_layer: 2, ..zero };
        assert!(h.reduce_delta(&early).is_err());
    }

    #[test]
    fn editor_starts_as_identity_and_checks_shapes() {
        let g = gcfg();
        let h = small_editor(5, None);
        let mut r = rng::derived(3, "f");
        let c = g.layer_channels(5);
        let f = FeatureTensor::new(Tensor::<f64>::randn(&[2, c, 16, 16], 1.0, &mut r), 5).unwrap();
        let d = DeltaMap { values: Tensor::randn(&[2, c, 16, 16], 1.0, &mut r), source_layer: 5, direction_name: "x".into(), power: 1.0 };
        let out = h.edit_features(&f, &d).unwrap();
        assert_eq!(out.values, f.values);
        let mut h2 = h.clone();
        perturb(&mut h2.params, "fe.h.out", 4);
        let a = h2.edit_features(&f, &d).unwrap();
        assert_eq!(a, h2.edit_features(&f, &d).unwrap());
        assert_eq!(a.values.shape(), f.values.shape());
        assert!(a.values.max_abs_diff(&f.values) > 0.0);
        let bad = DeltaMap { values: Tensor::zeros(&[2, c, 8, 8]), ..d };
        assert!(h.edit_features(&f, &bad).is_err());
    }

    #[test]
    fn editor_and_reducer_gradients() {
        let mut h = small_editor(3, Some(5));
        perturb(&mut h.params, "fe.", 5);
        let g = gcfg();
        let mut r = rng::derived(6, "x");
        let f = Tensor::<f64>::randn(&[1, g.layer_channels(3), 8, 8], 1.0, &mut r);
        let d = Tensor::<f64>::randn(&[1, g.layer_channels(5), 16, 16], 1.0, &mut r);
        let res = gradcheck::check_with_params(&[f, d], &h.params, 12, 7, 1e-5, |p, v| h.forward(p, v[0], v[1]).square().sum());
        assert!(res.passes(1e-4), "{:?}", res.probes);
    }

    #[test]
    fn mask_from_image_thresholds_and_downsamples() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.png");
        // Left half bright, right half dark, one bright pixel on the right.
        let mut img = image::GrayImage::from_fn(32, 32, |x, _| image::Luma([if x < 16 { 200 } else { 20 }]));
        img.put_pixel(30, 30, image::Luma([255]));
        img.save(&p).unwrap();
        let m = RegionMask::from_image(&p, 8).unwrap();
        for r in 0..8 {
            assert_eq!(&m.values()[r * 8..r * 8 + 8], &[1, 1, 1, 1, 0, 0, 0, 0]);
        }
        assert!(RegionMask::from_image(&p, 64).is_err());
    }

    fn pipeline_parts() -> (Generator<f64>, BaseEncoder<f64>, Inverter<f64>, FeatureEditor<f64>) {
        let g = Generator::<f64>::new(gcfg()).unwrap();
        let ecfg = BaseEncoderConfig { base_channels: 4, hidden: 8, ..Default::default() };
        let mut e = BaseEncoder::for_generator(ecfg, &g).unwrap();
        perturb(&mut e.params, "e.", 8);
        let icfg = InverterConfig {
            backbone_stage_channels: [4, 6, 6, 8],
            backbone_strides: [2, 1, 1, 2],
            blocks_per_stage: 1,
            predictor_blocks: 1,
            fuser_blocks: 1,
            w_head_hidden: 8,
            ..Default::default()
        };
        let mut inv = Inverter::new(icfg, &g.config, true).unwrap();
        perturb(&mut inv.params, "inv.", 9);
        let mut h = small_editor(5, None);
        perturb(&mut h.params, "fe.", 10);
        (g, e, inv, h)
    }

    #[test]
    fn zero_edit_is_bit_identical_to_inversion() {
        let (g, e, inv, h) = pipeline_parts();
        let pl = Pipeline { generator: &g, encoder: &e, inverter: &inv, editor: &h, options: PipelineOptions::default() };
        let mut r = rng::derived(11, "x");
        let x = Tensor::<f64>::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut r);
        let rec = pl.invert_image(&x).unwrap();
        assert_eq!(rec, pl.invert_image(&x).unwrap());
        let d = direction(8, 12);
        let zero = pl.edit_image(&x, EditRequest { direction: &d, power: 0.0, mask: None }).unwrap();
        assert_eq!(zero, rec);
        let edited = pl.edit_image(&x, EditRequest { direction: &d, power: 2.0, mask: None }).unwrap();
        assert!(edited.max_abs_diff(&rec) > 1e-6);
        let no_h = Pipeline { options: PipelineOptions { no_h: true, no_e: false }, ..pl };
        let inv_only = g.synthesize_from(&inv.invert(&g, &x).unwrap().1, &inv.invert(&g, &x).unwrap().0.tail(5)).unwrap();
        assert_eq!(no_h.invert_image(&x).unwrap(), inv_only);
        let mask = RegionMask::new(vec![1; 17 * 17], 17).unwrap();
        assert!(pl.edit_image(&x, EditRequest { direction: &d, power: 1.0, mask: Some(&mask) }).is_err());
    }

    proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(32))]
        #[test]
        fn mask_support_is_exact(bits in prop::collection::vec(0u8..2, 16), vals in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 16)) {
            let m = RegionMask::new(bits.clone(), 4).unwrap();
            let d = DeltaMap { values: Tensor::from_vec(&[2, 3, 4, 4], vals.clone()).unwrap(), source_layer: 0, direction_name: "x".into(), power: 1.0 };
            let out = apply_mask(&d, &m).unwrap();
            for (i, (&o, &v)) in out.values.data().iter().zip(&vals).enumerate() {
                if bits[i % 16] == 0 { prop_assert_eq!(o, 0.0); } else { prop_assert_eq!(o, v); }
            }
            let ones = apply_mask(&d, &RegionMask::full(4, true)).unwrap();
            prop_assert_eq!(&ones.values, &d.values);
            prop_assert!(apply_mask(&d, &RegionMask::full(4, false)).unwrap().values.data().iter().all(|&v| v == 0.0));
        }
    }
}
