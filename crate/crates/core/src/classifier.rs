//! Small convolutional attribute classifier. Besides labelling images it
//! supplies the multi-layer features behind the perceptual loss, the
//! embedding behind the identity loss and the toy-FID feature space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{invalid, CoreError, Result};
use crate::metrics::{MetricsLog, StepRecord};
use crate::nn::{lrelu_gain, Conv, Linear, LRELU_SLOPE};
use crate::rng;
use crate::toyworld::{AttributeVector, ATTRIBUTE_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub channels: [usize; 4],
    pub embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of Gaussian noise added to training inputs.
    pub input_noise: f64,
    pub init_seed: u64,
    pub log_every: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 48, 64],
            embed_dim: 64,
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            input_noise: 0.05,
            init_seed: 0,
            log_every: 100,
        }
    }
}

/// Raw outputs: two logits, five regressions and the hue angle as a unit
/// vector (hue wraps around, so it is not regressed directly).
const N_OUT: usize = 8;

/// Regression targets in roughly unit ranges, laid out like the outputs.
pub fn targets(a: &AttributeVector) -> [f64; N_OUT] {
    let tau = std::f64::consts::TAU;
    [
        f64::from(u8::from(a.glasses)),
        f64::from(u8::from(a.accessory)),
        a.smile,
        (a.hair_shade - 0.5) * 2.0,
        (a.face_size - 0.8) * 5.0,
        a.pose,
        (tau * a.bg_hue).cos(),
        (tau * a.bg_hue).sin(),
    ]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Probability that each attribute of [`ATTRIBUTE_NAMES`] is present, from
/// one row of raw outputs. Regressed attributes are thresholded softly
/// where [`AttributeVector::has`] thresholds them.
fn presence(o: &[f64]) -> [f64; 7] {
    [
        sigmoid(o[2] / 0.15),
        sigmoid(o[0]),
        sigmoid(o[3] / 0.2),
        sigmoid(o[4] / 0.2),
        sigmoid(o[5] / 0.15),
        sigmoid(o[6] / 0.2),
        sigmoid(o[1]),
    ]
}

pub fn attribute_index(name: &str) -> Result<usize> {
    ATTRIBUTE_NAMES
        .iter()
        .position(|&a| a == name)
        .ok_or_else(|| CoreError::Invalid(format!("unknown attribute `{name}`")))
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Scalar> {
    pub config: ClassifierConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        if config.channels.iter().any(|&c| c == 0) || config.embed_dim == 0 {
            return Err(CoreError::Config("classifier sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0xC1A5);
        let mut params = ParamStore::new();
        let c = Self { config, params: ParamStore::new() };
        for conv in c.convs() {
            conv.init(&mut params, &mut rng, lrelu_gain());
        }
        c.embed_layer().init(&mut params, &mut rng, lrelu_gain(), 0.0);
        c.head().init(&mut params, &mut rng, 1.0, 0.0);
        Ok(Self { params, ..c })
    }

    fn convs(&self) -> Vec<Conv> {
        let ch = self.config.channels;
        vec![
            Conv::new("c0", 3, ch[0], 3, 1),
            Conv::new("c1", ch[0], ch[1], 3, 2),
            Conv::new("c2", ch[1], ch[2], 3, 2),
            Conv::new("c3", ch[2], ch[3], 3, 2),
        ]
    }

    fn embed_layer(&self) -> Linear {
        Linear::new("embed", self.config.channels[3], self.config.embed_dim)
    }

    fn head(&self) -> Linear {
        Linear::new("head", self.config.embed_dim, N_OUT)
    }

    /// Activations after each convolution, and the embedding.
    pub fn forward_features<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> (Vec<Var<'g, T>>, Var<'g, T>) {
        let mut taps = Vec::with_capacity(4);
        let mut h = x;
        for conv in self.convs() {
            h = conv.forward(p, h).leaky_relu(LRELU_SLOPE);
            taps.push(h);
        }
        let e = self.embed_layer().forward(p, h.global_avg_pool()).leaky_relu(LRELU_SLOPE);
        (taps, e)
    }

    pub fn forward_outputs<'g>(&self, p: &Bound<'g, '_, T>, embedding: Var<'g, T>) -> Var<'g, T> {
        self.head().forward(p, embedding)
    }

    fn run_batched<F>(&self, images: &Tensor<T>, mut f: F) -> Result<()>
    where
        F: for<'g> FnMut(usize, &Bound<'g, '_, T>, Var<'g, T>),
    {
        if images.ndim() != 4 || images.dim(1) != 3 {
            return invalid(format!("classifier input must be [B, 3, H, W], got {:?}", images.shape()));
        }
        let n = images.dim(0);
        let chunk = 64;
        let mut lo = 0;
        while lo < n {
            let hi = (lo + chunk).min(n);
            let g = Graph::new();
            let p = Bound::new(&g, &self.params, false);
            f(lo, &p, g.constant(images.slice_batch(lo, hi)));
            lo = hi;
        }
        Ok(())
    }

    /// Penultimate embedding, `[B, E]`.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        self.run_batched(images, |_, p, x| parts.push(self.forward_features(p, x).1.tensor()))?;
        Ok(Tensor::cat_batch(&parts)?)
    }

    pub fn outputs(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        self.run_batched(images, |_, p, x| {
            let e = self.forward_features(p, x).1;
            parts.push(self.forward_outputs(p, e).tensor());
        })?;
        Ok(Tensor::cat_batch(&parts)?)
    }

    /// Presence probabilities, one row of 7 per image in
    /// [`ATTRIBUTE_NAMES`] order.
    pub fn presence(&self, images: &Tensor<T>) -> Result<Vec<[f64; 7]>> {
        let out = self.outputs(images)?;
        Ok(out
            .data()
            .chunks(N_OUT)
            .map(|row| presence(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect())
    }

    /// Presence probability of one attribute per image.
    pub fn score(&self, images: &Tensor<T>, attribute: &str) -> Result<Vec<f64>> {
        let i = attribute_index(attribute)?;
        Ok(self.presence(images)?.iter().map(|r| r[i]).collect())
    }
}

/// Training state of the classifier.
#[derive(Debug, Clone)]
pub struct ClassifierState<T: Scalar> {
    pub net: Classifier<T>,
    pub opt: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> ClassifierState<T> {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        let lr = config.lr;
        Ok(Self { net: Classifier::new(config)?, opt: Adam::new(AdamConfig::new(lr)), step: 0 })
    }
}

/// Binary cross-entropy on the two logits plus squared error on the rest.
fn loss<'g, T: Scalar>(out: Var<'g, T>, target: &Tensor<T>) -> Var<'g, T> {
    let g = out.graph();
    let b = out.dim(0);
    let logits = out.slice1(0, 2);
    let y = g.constant(target.clone());
    let y_bin = y.slice1(0, 2);
    // softplus(z) - y z is the logistic loss for label y.
    let bce = logits.softplus() - logits * y_bin;
    let reg = (out.slice1(2, N_OUT) - y.slice1(2, N_OUT)).square();
    bce.sum().scale(T::lit(1.0 / (2 * b) as f64)) + reg.mean()
}

pub fn train_classifier<T: Scalar>(
    st: &mut ClassifierState<T>,
    images: &Tensor<T>,
    attrs: &[AttributeVector],
    seed: u64,
    until: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    let n = images.dim(0);
    if n == 0 || n != attrs.len() {
        return invalid("classifier training needs one attribute vector per image");
    }
    let cfg = st.net.config.clone();
    while st.step < until {
        let mut rng = rng::stream(seed, "classifier", st.step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let mut x = images.select_batch(&idx);
        if cfg.input_noise > 0.0 {
            x.add_assign(&Tensor::randn(x.shape(), cfg.input_noise, &mut rng));
        }
        let t: Vec<T> = idx.iter().flat_map(|&i| targets(&attrs[i])).map(T::lit).collect();
        let t = Tensor::from_vec(&[idx.len(), N_OUT], t)?;
        let g = Graph::new();
        let p = Bound::new(&g, &st.net.params, true);
        let (_, e) = st.net.forward_features(&p, g.constant(x));
        let l = loss(st.net.forward_outputs(&p, e), &t);
        let lv = l.item().as_f64();
        if !lv.is_finite() {
            return Err(CoreError::Diverged { step: st.step, what: format!("classifier loss = {lv}") });
        }
        let mut grads = g.backward(l);
        let grads = p.grads(&mut grads);
        drop(p);
        st.opt.step(&mut st.net.params, &grads);
        st.step += 1;
        if st.step % cfg.log_every.max(1) == 0 || st.step == until {
            log.write(&StepRecord::new("classifier", st.step).with("loss", lv))?;
        }
    }
    log.flush()
}

/// Fraction of images whose thresholded presence matches the ground truth,
/// per attribute.
pub fn accuracy<T: Scalar>(
    net: &Classifier<T>,
    images: &Tensor<T>,
    attrs: &[AttributeVector],
) -> Result<[f64; 7]> {
    let pres = net.presence(images)?;
    let mut acc = [0.0; 7];
    for (row, a) in pres.iter().zip(attrs) {
        for (j, name) in ATTRIBUTE_NAMES.iter().enumerate() {
            if (row[j] > 0.5) == a.has(name)? {
                acc[j] += 1.0;
            }
        }
    }
    for v in &mut acc {
        *v /= attrs.len().max(1) as f64;
    }
    Ok(acc)
}
