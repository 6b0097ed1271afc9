//! Loss terms, their weighted compositions for both training phases, and
//! the image-quality metrics (MS-SSIM, Fréchet distance).
//!
//! Perceptual and identity terms are computed on the attribute classifier:
//! perceptual compares channel-normalized activations of every conv layer
//! (uniform channel weights), identity is one minus the cosine of the
//! embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sfe_tensor::{Bound, Graph, Scalar, Tensor, Var};

use crate::classifier::Classifier;
use crate::error::{invalid, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lpips: f64,
    pub id: f64,
    pub adv: f64,
    pub reg: f64,
    /// Scale of the second image pair in phase 1 (reconstruction from `w`
    /// alone) relative to the fused reconstruction.
    pub w_pair_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lpips: 0.8, id: 0.1, adv: 0.01, reg: 0.01, w_pair_scale: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lpips, self.id, self.adv, self.reg, self.w_pair_scale];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Something a loss can be made of: a plain number or a graph node.
pub trait Term: Copy {
    fn scaled(self, c: f64) -> Self;
    fn plus(self, other: Self) -> Self;
}

impl Term for f64 {
    fn scaled(self, c: f64) -> Self {
        self * c
    }

    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl<'g, T: Scalar> Term for Var<'g, T> {
    fn scaled(self, c: f64) -> Self {
        self.scale(T::lit(c))
    }

    fn plus(self, other: Self) -> Self {
        self + other
    }
}

fn add_opt<V: Term>(a: Option<V>, b: Option<V>) -> Option<V> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.plus(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Unweighted image-loss components for one (target, reconstruction) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTerms<V> {
    pub l2: V,
    pub lpips: V,
    pub id: V,
    pub adv: Option<V>,
}

impl<V: Term> ImageTerms<V> {
    fn scaled(self, c: f64) -> Self {
        Self {
            l2: self.l2.scaled(c),
            lpips: self.lpips.scaled(c),
            id: self.id.scaled(c),
            adv: self.adv.map(|a| a.scaled(c)),
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            l2: self.l2.plus(o.l2),
            lpips: self.lpips.plus(o.lpips),
            id: self.id.plus(o.id),
            adv: add_opt(self.adv, o.adv),
        }
    }

    fn without_adv(self) -> Self {
        Self { adv: None, ..self }
    }
}

/// Summed components and their weighted total. Since every composition is
/// linear, `total = l2 + λ_lpips·lpips + λ_id·id + λ_adv·adv + λ_reg·reg`
/// holds for the summed components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<V> {
    pub terms: ImageTerms<V>,
    pub reg: Option<V>,
    pub total: V,
}

pub type LossBreakdown = LossParts<f64>;

fn weighted<V: Term>(terms: ImageTerms<V>, reg: Option<V>, w: &LossWeights) -> LossParts<V> {
    let mut total = terms.l2.plus(terms.lpips.scaled(w.lpips)).plus(terms.id.scaled(w.id));
    if let Some(a) = terms.adv {
        total = total.plus(a.scaled(w.adv));
    }
    if let Some(r) = reg {
        total = total.plus(r.scaled(w.reg));
    }
    LossParts { terms, reg, total }
}

/// Single-pair image loss: L2 plus weighted perceptual, identity and
/// (when present) adversarial terms.
pub fn image_loss<V: Term>(terms: ImageTerms<V>, w: &LossWeights) -> LossParts<V> {
    weighted(terms, None, w)
}

/// Phase 1: the image loss on the fused reconstruction and on the
/// reconstruction from `w` alone, plus the feature-norm regularizer.
pub fn compose_phase1<V: Term>(fused: ImageTerms<V>, w_only: ImageTerms<V>, reg: V, w: &LossWeights) -> LossParts<V> {
    weighted(fused.plus(w_only.scaled(w.w_pair_scale)), Some(reg), w)
}

/// Phase 2: the edit branch never carries an adversarial term; the
/// inversion branch may. `inv` is `None` in the no-inversion-loss ablation.
pub fn compose_phase2<V: Term>(edit: ImageTerms<V>, inv: Option<ImageTerms<V>>, w: &LossWeights) -> LossParts<V> {
    let edit = edit.without_adv();
    let terms = match inv {
        Some(inv) => edit.plus(inv),
        None => edit,
    };
    weighted(terms, None, w)
}

impl<'g, T: Scalar> LossParts<Var<'g, T>> {
    pub fn breakdown(&self) -> LossBreakdown {
        let f = |v: Var<'g, T>| v.item().as_f64();
        LossParts {
            terms: ImageTerms {
                l2: f(self.terms.l2),
                lpips: f(self.terms.lpips),
                id: f(self.terms.id),
                adv: self.terms.adv.map(f),
            },
            reg: self.reg.map(f),
            total: f(self.total),
        }
    }
}

impl LossBreakdown {
    /// Named values for the metrics log.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("l2", self.terms.l2),
            ("lpips", self.terms.lpips),
            ("id", self.terms.id),
            ("adv", self.terms.adv.unwrap_or(0.0)),
            ("reg", self.reg.unwrap_or(0.0)),
            ("total", self.total),
        ]
    }
}

// Graph-level terms. Images are [B, 3, R, R]; every term is a batch mean.

pub fn l2_var<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    (a - b).square().mean()
}

/// Non-saturating generator loss `softplus(-D(fake))`.
pub fn adversarial_g_var<'g, T: Scalar>(score_fake: Var<'g, T>) -> Var<'g, T> {
    (-score_fake).softplus().mean()
}

pub fn adversarial_d_var<'g, T: Scalar>(score_real: Var<'g, T>, score_fake: Var<'g, T>) -> Var<'g, T> {
    (-score_real).softplus().mean() + score_fake.softplus().mean()
}

/// Mean over the batch of per-sample Frobenius norms.
pub fn reg_norm_var<'g, T: Scalar>(f: Var<'g, T>) -> Var<'g, T> {
    f.square().sum_per_sample().sqrt(1e-12).mean()
}

const NORM_EPS: f64 = 1e-16;

/// Classifier activations of a target image, computed once and reused
/// against several reconstructions.
pub struct Target<'g, T: Scalar> {
    pub image: Var<'g, T>,
    taps: Vec<Var<'g, T>>,
    embed: Var<'g, T>,
}

/// Perceptual and identity terms on one graph.
pub struct Critic<'g, 's, T: Scalar> {
    net: &'s Classifier<T>,
    p: Bound<'g, 's, T>,
}

impl<'g, 's, T: Scalar> Critic<'g, 's, T> {
    pub fn new(g: &'g Graph<T>, net: &'s Classifier<T>) -> Self {
        Self { net, p: Bound::new(g, &net.params, false) }
    }

    fn features(&self, x: Var<'g, T>) -> (Vec<Var<'g, T>>, Var<'g, T>) {
        let (taps, e) = self.net.forward_features(&self.p, x);
        (taps.into_iter().map(|t| t.normalize1(NORM_EPS)).collect(), e.normalize1(NORM_EPS))
    }

    /// Target activations carry no gradient.
    pub fn target(&self, x: Var<'g, T>) -> Target<'g, T> {
        let (taps, embed) = self.features(x.detach());
        Target { image: x, taps: taps.into_iter().map(|t| t.detach()).collect(), embed: embed.detach() }
    }

    /// Per-sample perceptual distance `[B]`: the mean over layers of the
    /// spatial mean of squared normalized-feature differences.
    pub fn perceptual_per_sample(&self, a: &[Var<'g, T>], b: &[Var<'g, T>]) -> Var<'g, T> {
        let n = a.len() as f64;
        let per_layer = a.iter().zip(b).map(|(&fa, &fb)| {
            let area = (fa.dim(2) * fa.dim(3)) as f64;
            (fa - fb).square().sum_per_sample().scale(T::lit(1.0 / (area * n)))
        });
        per_layer.reduce(|x, y| x + y).expect("classifier has layers")
    }

    /// Per-sample `1 - cos` of unit embeddings `[B]`.
    pub fn identity_per_sample(ea: Var<'g, T>, eb: Var<'g, T>) -> Var<'g, T> {
        (ea * eb).sum_per_sample().scale(T::lit(-1.0)).add_scalar(T::one())
    }

    /// Components for `recon` against `target`. `adv` is the critic score
    /// of `recon` when the adversarial term is wanted.
    pub fn terms(&self, target: &Target<'g, T>, recon: Var<'g, T>, adv: Option<Var<'g, T>>) -> ImageTerms<Var<'g, T>> {
        let (taps, e) = self.features(recon);
        ImageTerms {
            l2: l2_var(target.image.detach(), recon),
            lpips: self.perceptual_per_sample(&target.taps, &taps).mean(),
            id: Self::identity_per_sample(target.embed, e).mean(),
            adv: adv.map(adversarial_g_var),
        }
    }

    pub fn perceptual_pairs(&self, a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        self.perceptual_per_sample(&self.features(a).0, &self.features(b).0)
    }

    pub fn identity_pairs(&self, a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        Self::identity_per_sample(self.features(a).1, self.features(b).1)
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.ndim() != 4 || a.dim(1) != 3 {
        return invalid(format!("expected [B, 3, H, W] images, got {:?}", a.shape()));
    }
    Ok(())
}

pub fn l2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len().max(1) as f64)
}

/// Per-image mean squared error.
pub fn l2_per_sample<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let r = a.row_len();
    Ok(a.data()
        .chunks(r)
        .zip(b.data().chunks(r))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum::<f64>() / r as f64)
        .collect())
}

fn per_sample_pairs<T: Scalar, F>(net: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>, f: F) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&Critic<'g, '_, T>, Var<'g, T>, Var<'g, T>) -> Var<'g, T>,
{
    check_pair(a, b)?;
    let n = a.dim(0);
    let mut out = Vec::with_capacity(n);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + 64).min(n);
        let g = Graph::new();
        let c = Critic::new(&g, net);
        let v = f(&c, g.constant(a.slice_batch(lo, hi)), g.constant(b.slice_batch(lo, hi)));
        out.extend(v.value().data().iter().map(|x| x.as_f64()));
        lo = hi;
    }
    Ok(out)
}

pub fn perceptual_per_sample<T: Scalar>(net: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    per_sample_pairs(net, a, b, |c, x, y| c.perceptual_pairs(x, y))
}

pub fn identity_per_sample<T: Scalar>(net: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    per_sample_pairs(net, a, b, |c, x, y| c.identity_pairs(x, y))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn perceptual<T: Scalar>(net: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(mean(&perceptual_per_sample(net, a, b)?))
}

pub fn identity_loss<T: Scalar>(net: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(mean(&identity_per_sample(net, a, b)?))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn adversarial_g(score_fake: &[f64]) -> f64 {
    mean(&score_fake.iter().map(|&s| softplus(-s)).collect::<Vec<_>>())
}

pub fn adversarial_d(score_real: &[f64], score_fake: &[f64]) -> f64 {
    mean(&score_real.iter().map(|&s| softplus(-s)).collect::<Vec<_>>())
        + mean(&score_fake.iter().map(|&s| softplus(s)).collect::<Vec<_>>())
}

/// Frobenius norm of one feature tensor, or the mean per-sample norm of a
/// batch `[B, C, S, S]`.
pub fn reg_norm<T: Scalar>(f: &Tensor<T>) -> f64 {
    if f.ndim() < 4 {
        return f.sq_norm().as_f64().sqrt();
    }
    mean(&f.data().chunks(f.row_len()).map(|c| c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()).collect::<Vec<_>>())
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Images live in [-1, 1].
const DATA_RANGE: f64 = 2.0;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; taps falling outside the plane are dropped and
/// the remaining weights renormalized, so small planes need no padding.
fn blur(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, &kv) in k.iter().enumerate() {
                    let o = t as isize - r;
                    let (ii, jj) = if horizontal { (i as isize, j as isize + o) } else { (i as isize + o, j as isize) };
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += kv * src[ii as usize * w + jj as usize];
                        wsum += kv;
                    }
                }
                out[i * w + j] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Mean luminance and contrast-structure SSIM components of one plane.
fn ssim_components(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_kernel(7, 1.5);
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, mu_b) = (blur(a, h, w, &k), blur(b, h, w, &k));
    let (aa, bb, ab) = (blur(&prod(a, a), h, w, &k), blur(&prod(b, b), h, w, &k), blur(&prod(a, b), h, w, &k));
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = (aa[i] - ma * ma).max(0.0);
        let vb = (bb[i] - mb * mb).max(0.0);
        let cov = ab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    let n = a.len() as f64;
    (lum / n, cs / n)
}

fn downsample(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h / 2 * (w / 2));
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            out.push((x[2 * i * w + 2 * j] + x[2 * i * w + 2 * j + 1] + x[(2 * i + 1) * w + 2 * j] + x[(2 * i + 1) * w + 2 * j + 1]) / 4.0);
        }
    }
    out
}

/// Multi-scale SSIM of two `[3, H, W]` images in [-1, 1]. Uses as many of
/// the five standard scales as keep the coarsest plane at least 8 pixels
/// wide, with the standard weights renormalized; negative components are
/// clamped to zero so the result stays in [0, 1].
pub fn ms_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 3 || a.dim(0) != 3 {
        return invalid(format!("ms_ssim needs two [3, H, W] images, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (mut h, mut w) = (a.dim(1), a.dim(2));
    let mut scales = 1;
    while scales < MS_SSIM_WEIGHTS.len() && (h.min(w) >> scales) >= 8 {
        scales += 1;
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let plane = h * w;
    let mut pa: Vec<Vec<f64>> = (0..3).map(|c| a.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).collect()).collect();
    let mut pb: Vec<Vec<f64>> = (0..3).map(|c| b.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).collect()).collect();
    let mut result = 1.0;
    for (s, &wt) in weights.iter().enumerate() {
        let (mut lum, mut cs) = (0.0, 0.0);
        for c in 0..3 {
            let (l, k) = ssim_components(&pa[c], &pb[c], h, w);
            lum += l / 3.0;
            cs += k / 3.0;
        }
        let last = s + 1 == scales;
        let v = if last { lum * cs } else { cs };
        result *= v.max(0.0).powf(wt / wsum);
        if !last {
            pa = pa.iter().map(|p| downsample(p, h, w)).collect();
            pb = pb.iter().map(|p| downsample(p, h, w)).collect();
            h /= 2;
            w /= 2;
        }
    }
    Ok(result.min(1.0))
}

/// Mean MS-SSIM over a batch `[B, 3, H, W]`.
pub fn ms_ssim_batch<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let v = (0..a.dim(0)).map(|i| ms_ssim(&a.index_batch(i), &b.index_batch(i))).collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

/// Mean and covariance of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Unbiased estimate from `[n, d]` features, `n ≥ 2`.
    pub fn from_features<T: Scalar>(f: &Tensor<T>) -> Result<Self> {
        if f.ndim() != 2 || f.dim(0) < 2 {
            return invalid(format!("need at least two [n, d] feature rows, got {:?}", f.shape()));
        }
        let (n, d) = (f.dim(0), f.dim(1));
        let x = DMatrix::from_row_iterator(n, d, f.data().iter().map(|v| v.as_f64()));
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

const PSD_TOL: f64 = 1e-6;

fn sym_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return invalid(format!("{what} is not square"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > PSD_TOL * scale {
        return invalid(format!("{what} is not symmetric"));
    }
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if e.eigenvalues.min() < -PSD_TOL * scale {
        return invalid(format!("{what} is not positive semi-definite (eigenvalue {})", e.eigenvalues.min()));
    }
    Ok(e)
}

fn psd_sqrt(e: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μ₁-μ₂‖² + tr(Σ₁ + Σ₂ - 2(Σ₁Σ₂)^½)`. The trace of the square root is
/// taken from the symmetric product `Σ₁^½ Σ₂ Σ₁^½`, which shares its
/// eigenvalues with `Σ₁Σ₂`; eigenvalues below 1e-10 are clipped.
pub fn frechet_distance(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return invalid("frechet_distance: dimension mismatch");
    }
    let e1 = sym_eigen(s1, "first covariance")?;
    sym_eigen(s2, "second covariance")?;
    let r1 = psd_sqrt(&e1);
    let m = &r1 * s2 * &r1;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(1e-10).sqrt()).sum();
    let dm = m1 - m2;
    Ok((dm.dot(&dm) + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn frechet_between(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Fréchet distance between classifier-embedding statistics of two image
/// sets ("toy-FID").
pub fn toy_fid<T: Scalar>(net: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let sa = GaussianStats::from_features(&net.embed(a)?)?;
    let sb = GaussianStats::from_features(&net.embed(b)?)?;
    frechet_between(&sa, &sb)
}
