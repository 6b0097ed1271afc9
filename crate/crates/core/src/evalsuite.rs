//! Evaluation: inversion quality, the editing-FID protocol, rotation FID,
//! classifier flip rate, identity similarity and timing, plus the report
//! files and image grids.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Scalar, Tensor};

use crate::classifier::Classifier;
use crate::directions::{apply, DirectionRegistry, EditingDirection};
use crate::encoder_w::BaseEncoder;
use crate::error::{invalid, CoreError, Result};
use crate::feature_editor::{EditRequest, Pipeline};
use crate::imageio::grid;
use crate::objectives::{identity_per_sample, l2_per_sample, mean, ms_ssim_batch, perceptual_per_sample, toy_fid};
use crate::rng;
use crate::stylegen::Generator;
use crate::toyworld::RenderedSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test images used (the first `n_test` of the test split).
    pub n_test: usize,
    pub seed: u64,
    /// Directions evaluated for editing; empty means every direction with
    /// an attribute.
    pub directions: Vec<String>,
    /// Evaluate flip rate at every default power, not just the calibrated one.
    pub power_sweep: bool,
    /// Direction for the rotation-FID protocol.
    pub rotation_direction: String,
    pub timing_images: usize,
    pub timing_repeats: usize,
    pub grid_images: usize,
    pub grid_directions: Vec<String>,
    /// Images per inference batch.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_test: 400,
            seed: 0,
            directions: Vec::new(),
            power_sweep: true,
            rotation_direction: "pose+".into(),
            timing_images: 16,
            timing_repeats: 3,
            grid_images: 6,
            grid_directions: ["smile+", "glasses+", "hair_shade-", "pose+", "accessory+"].map(String::from).to_vec(),
            batch: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_test < 4 || self.batch == 0 || self.timing_repeats == 0 {
            return Err(CoreError::Config("eval: need n_test >= 4 and positive batch and repeats".into()));
        }
        Ok(())
    }
}

/// Anything that can reconstruct and edit images: the full pipeline, its
/// ablations, or the base-encoder baseline.
pub trait ImageEditor<T: Scalar> {
    fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn edit(&self, x: &Tensor<T>, d: &EditingDirection, power: f64) -> Result<Tensor<T>>;
}

impl<T: Scalar> ImageEditor<T> for Pipeline<'_, T> {
    fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.invert_image(x)
    }

    fn edit(&self, x: &Tensor<T>, d: &EditingDirection, power: f64) -> Result<Tensor<T>> {
        self.edit_image(x, EditRequest { direction: d, power, mask: None })
    }
}

/// `G(E(x))` and `G(E(x) + d)`.
pub struct EncoderBaseline<'a, T: Scalar> {
    pub generator: &'a Generator<T>,
    pub encoder: &'a BaseEncoder<T>,
}

impl<T: Scalar> ImageEditor<T> for EncoderBaseline<'_, T> {
    fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.generator.synthesize(&self.encoder.encode(x, self.generator.w_avg())?)
    }

    fn edit(&self, x: &Tensor<T>, d: &EditingDirection, power: f64) -> Result<Tensor<T>> {
        let w = self.encoder.encode(x, self.generator.w_avg())?;
        self.generator.synthesize(&apply(&w, d, power)?)
    }
}

fn batched<T: Scalar>(x: &Tensor<T>, batch: usize, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.dim(0);
    let mut parts = Vec::new();
    let mut lo = 0;
    while lo < n {
        let hi = (lo + batch).min(n);
        parts.push(f(&x.slice_batch(lo, hi))?);
        lo = hi;
    }
    Ok(Tensor::cat_batch(&parts)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionMetrics {
    pub l2: f64,
    pub perceptual: f64,
    pub ms_ssim: f64,
    pub toy_fid: f64,
    pub identity_similarity: f64,
    pub n: usize,
}

/// Means over the test images plus toy-FID between real and reconstructed sets.
pub fn inversion_metrics<T: Scalar>(cls: &Classifier<T>, real: &Tensor<T>, recon: &Tensor<T>) -> Result<InversionMetrics> {
    if real.dim(0) < 2 {
        return invalid("inversion metrics need at least two test images");
    }
    Ok(InversionMetrics {
        l2: mean(&l2_per_sample(real, recon)?),
        perceptual: mean(&perceptual_per_sample(cls, real, recon)?),
        ms_ssim: ms_ssim_batch(real, recon)?,
        toy_fid: toy_fid(cls, real, recon)?,
        identity_similarity: 1.0 - mean(&identity_per_sample(cls, real, recon)?),
        n: real.dim(0),
    })
}

/// Fraction of images the classifier puts in the `on` state of `attribute`.
pub fn flip_rate<T: Scalar>(cls: &Classifier<T>, images: &Tensor<T>, attribute: &str, on: bool) -> Result<f64> {
    if images.dim(0) == 0 {
        return invalid("flip rate of an empty set");
    }
    let s = cls.score(images, attribute)?;
    Ok(s.iter().filter(|&&p| (p > 0.5) == on).count() as f64 / s.len() as f64)
}

/// Mean cosine similarity of classifier embeddings.
pub fn id_similarity<T: Scalar>(cls: &Classifier<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(1.0 - mean(&identity_per_sample(cls, a, b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditingMetrics {
    pub attribute: String,
    pub target_on: bool,
    pub power: f64,
    /// toy-FID between images already in the target state (A) and the
    /// edited others (B′); the primary statistic.
    pub editing_fid: f64,
    /// toy-FID between the unedited others (B) and B′.
    pub editing_fid_b: f64,
    pub flip_rate: f64,
    /// Flip rate of plain reconstructions of B: the classifier's floor.
    pub flip_rate_zero: f64,
    /// Flip rate at each default power, ascending.
    pub flip_rate_by_power: Vec<(f64, f64)>,
    pub id_similarity: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// The editing protocol for one direction: split the test set by the
/// direction's attribute, edit the images not yet in the target state and
/// compare.
pub fn editing_metrics<T: Scalar>(
    ed: &dyn ImageEditor<T>,
    cls: &Classifier<T>,
    test: &RenderedSet<T>,
    recon: &Tensor<T>,
    d: &EditingDirection,
    cfg: &EvalConfig,
) -> Result<EditingMetrics> {
    let (attr, on) = d.attribute.clone().ok_or_else(|| CoreError::Invalid(format!("`{}` has no attribute", d.name)))?;
    let (with, without) = test.partition(&attr)?;
    let (a_idx, b_idx) = if on { (with, without) } else { (without, with) };
    if a_idx.len() < 2 || b_idx.len() < 2 {
        return invalid(format!("`{}`: split {}/{} too small for toy-FID", d.name, a_idx.len(), b_idx.len()));
    }
    let a = test.batch(&a_idx);
    let b = test.batch(&b_idx);
    let power = d.calibrated_power();
    let b_edit = batched(&b, cfg.batch, |x| ed.edit(x, d, power))?;
    let flip = flip_rate(cls, &b_edit, &attr, on)?;
    let mut by_power = Vec::new();
    if cfg.power_sweep {
        for &p in &d.default_powers {
            let r = if p == power { flip } else { flip_rate(cls, &batched(&b, cfg.batch, |x| ed.edit(x, d, p))?, &attr, on)? };
            by_power.push((p, r));
        }
    }
    Ok(EditingMetrics {
        attribute: attr.clone(),
        target_on: on,
        power,
        editing_fid: toy_fid(cls, &a, &b_edit)?,
        editing_fid_b: toy_fid(cls, &b, &b_edit)?,
        flip_rate: flip,
        flip_rate_zero: flip_rate(cls, &recon.select_batch(&b_idx), &attr, on)?,
        flip_rate_by_power: by_power,
        id_similarity: id_similarity(cls, &b, &b_edit)?,
        n_a: a_idx.len(),
        n_b: b_idx.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationFid {
    pub direction: String,
    /// First half untouched, second half edited.
    pub fid: f64,
    /// The halves swapped.
    pub fid_swapped: f64,
    /// Both halves only reconstructed.
    pub fid_zero: f64,
}

/// Splits the test set into two seeded halves, edits one and compares it
/// with the other, untouched half.
pub fn rotation_fid<T: Scalar>(
    ed: &dyn ImageEditor<T>,
    cls: &Classifier<T>,
    images: &Tensor<T>,
    recon: &Tensor<T>,
    d: &EditingDirection,
    cfg: &EvalConfig,
) -> Result<RotationFid> {
    let n = images.dim(0);
    if n % 2 != 0 || n < 4 {
        return invalid(format!("rotation FID needs an even split, got {n} images"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::derived(cfg.seed, "rotation-split"));
    let (h1, h2) = idx.split_at(n / 2);
    let p = d.calibrated_power();
    let edit = |h: &[usize]| batched(&images.select_batch(h), cfg.batch, |x| ed.edit(x, d, p));
    Ok(RotationFid {
        direction: d.name.clone(),
        fid: toy_fid(cls, &images.select_batch(h1), &edit(h2)?)?,
        fid_swapped: toy_fid(cls, &images.select_batch(h2), &edit(h1)?)?,
        fid_zero: toy_fid(cls, &recon.select_batch(h1), &recon.select_batch(h2))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Per image, editing one image at a time.
    pub single_seconds: f64,
    /// Per image, editing the whole batch at once.
    pub batched_seconds: f64,
    /// Coefficient of variation of the single-image measurement over repeats.
    pub single_cv: f64,
    pub n_images: usize,
    pub repeats: usize,
}

pub fn timing<T: Scalar>(ed: &dyn ImageEditor<T>, images: &Tensor<T>, d: &EditingDirection, repeats: usize) -> Result<Timing> {
    let n = images.dim(0);
    if n == 0 || repeats == 0 {
        return invalid("timing needs images and repeats");
    }
    let p = d.calibrated_power();
    // One untimed pass to warm caches.
    ed.edit(&images.slice_batch(0, 1), d, p)?;
    let mut singles = Vec::new();
    let mut batched_t = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        for i in 0..n {
            ed.edit(&images.slice_batch(i, i + 1), d, p)?;
        }
        singles.push(t.elapsed().as_secs_f64() / n as f64);
        let t = Instant::now();
        ed.edit(images, d, p)?;
        batched_t = batched_t.min(t.elapsed().as_secs_f64() / n as f64);
    }
    let m = mean(&singles);
    let sd = (singles.iter().map(|s| (s - m).powi(2)).sum::<f64>() / singles.len() as f64).sqrt();
    Ok(Timing { single_seconds: m, batched_seconds: batched_t, single_cv: sd / m, n_images: n, repeats })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub label: String,
    pub checkpoints: BTreeMap<String, String>,
    pub seed: u64,
    pub n_test: usize,
}

/// Everything `eval full` computes. Timing is kept out of the report file
/// because it is not reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: ReportProvenance,
    pub inversion: InversionMetrics,
    pub editing: BTreeMap<String, EditingMetrics>,
    pub rotation: Option<RotationFid>,
    #[serde(skip)]
    pub timing: Option<Timing>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let inv = &self.inversion;
        let mut all = vec![inv.l2, inv.perceptual, inv.ms_ssim, inv.toy_fid, inv.identity_similarity];
        for e in self.editing.values() {
            all.extend([e.editing_fid, e.editing_fid_b, e.flip_rate, e.flip_rate_zero, e.id_similarity]);
        }
        if let Some(r) = &self.rotation {
            all.extend([r.fid, r.fid_swapped, r.fid_zero]);
        }
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("report holds non-finite metrics".into()));
        }
        if self.provenance.checkpoints.is_empty() {
            return Err(CoreError::Invalid("report provenance lists no checkpoints".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,attribute,target_on,power,editing_fid,editing_fid_b,flip_rate,flip_rate_zero,id_similarity,n_a,n_b\n");
        for (name, e) in &self.editing {
            s += &format!(
                "{name},{},{},{},{},{},{},{},{},{},{}\n",
                e.attribute, e.target_on, e.power, e.editing_fid, e.editing_fid_b, e.flip_rate, e.flip_rate_zero, e.id_similarity, e.n_a, e.n_b
            );
        }
        s
    }

    /// Writes `report.json` and `report.csv` (and `timing.json` if timed).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| CoreError::io(&p, e))
        };
        put("report.json", serde_json::to_string_pretty(self)? + "\n")?;
        put("report.csv", self.to_csv())?;
        if let Some(t) = &self.timing {
            put("timing.json", serde_json::to_string_pretty(t)? + "\n")?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        let s = std::fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Directions an evaluation covers.
pub fn eval_directions<'r>(reg: &'r DirectionRegistry, cfg: &EvalConfig) -> Result<Vec<&'r EditingDirection>> {
    if cfg.directions.is_empty() {
        Ok(reg.directions.iter().filter(|d| d.attribute.is_some()).collect())
    } else {
        cfg.directions.iter().map(|n| reg.get(n)).collect()
    }
}

/// The full evaluation of one editor on the test set.
pub fn eval_full<T: Scalar>(
    ed: &dyn ImageEditor<T>,
    cls: &Classifier<T>,
    test: &RenderedSet<T>,
    reg: &DirectionRegistry,
    cfg: &EvalConfig,
    provenance: ReportProvenance,
) -> Result<EvalReport> {
    let dirs = eval_directions(reg, cfg)?;
    let recon = batched(&test.images, cfg.batch, |x| ed.reconstruct(x))?;
    let inversion = inversion_metrics(cls, &test.images, &recon)?;
    let mut editing = BTreeMap::new();
    for d in dirs {
        editing.insert(d.name.clone(), editing_metrics(ed, cls, test, &recon, d, cfg)?);
    }
    let rotation = match reg.get(&cfg.rotation_direction) {
        Ok(d) if test.len() % 2 == 0 => Some(rotation_fid(ed, cls, &test.images, &recon, d, cfg)?),
        _ => None,
    };
    let report = EvalReport { provenance, inversion, editing, rotation, timing: None };
    report.validate()?;
    Ok(report)
}

/// Rows: one per test image; columns: original, reconstruction, then each
/// direction at its calibrated power.
pub fn write_grid<T: Scalar>(
    ed: &dyn ImageEditor<T>,
    images: &Tensor<T>,
    dirs: &[&EditingDirection],
    path: &Path,
) -> Result<()> {
    let recon = ed.reconstruct(images)?;
    let edits = dirs.iter().map(|d| ed.edit(images, d, d.calibrated_power())).collect::<Result<Vec<_>>>()?;
    let cells: Vec<Vec<Tensor<T>>> = (0..images.dim(0))
        .map(|i| {
            let mut row = vec![images.index_batch(i), recon.index_batch(i)];
            row.extend(edits.iter().map(|e| e.index_batch(i)));
            row
        })
        .collect();
    let img = grid(&cells)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    img.save(path).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::directions::DirectionSource;
    use crate::toyworld::{build_manifest, AttributePriors, Split};

    /// Reconstructs perfectly and "edits" by returning the input.
    struct Oracle;

    impl ImageEditor<f64> for Oracle {
        fn reconstruct(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(x.clone())
        }

        fn edit(&self, x: &Tensor<f64>, _: &EditingDirection, _: f64) -> Result<Tensor<f64>> {
            Ok(x.clone())
        }
    }

    fn setup() -> (Classifier<f64>, RenderedSet<f64>, DirectionRegistry) {
        let cls = Classifier::new(ClassifierConfig { channels: [4, 4, 4, 4], embed_dim: 8, ..Default::default() }).unwrap();
        let test = RenderedSet::new(build_manifest(40, 3, Split::Test, &AttributePriors::default()).unwrap(), 32).unwrap();
        let mut v = vec![0.0; 8];
        v[0] = 1.0;
        let mut d = EditingDirection::new("glasses+", v, DirectionSource::Probe).unwrap();
        d.attribute = Some(("glasses".into(), true));
        d.default_powers = vec![0.5, 1.0, 1.5];
        let mut p = EditingDirection::new("pose+", vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], DirectionSource::Probe).unwrap();
        p.attribute = Some(("pose".into(), true));
        let reg = DirectionRegistry {
            schema_version: crate::directions::SCHEMA_VERSION,
            style_dim: 8,
            num_layers: 8,
            w_mean: vec![0.0; 8],
            directions: vec![d, p],
            train: vec!["glasses+".into()],
            small: vec!["glasses+".into()],
            holdout: vec!["pose+".into()],
            probe_accuracy: BTreeMap::new(),
        };
        (cls, test, reg)
    }

    #[test]
    fn oracle_scores_best_possible() {
        let (cls, test, _) = setup();
        let m = inversion_metrics(&cls, &test.images, &test.images).unwrap();
        assert_eq!(m.l2, 0.0);
        assert!((m.ms_ssim - 1.0).abs() < 1e-12);
        assert!(m.toy_fid <= 1e-3, "{}", m.toy_fid);
        assert!(m.perceptual.abs() < 1e-12);
        assert!((m.identity_similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn editing_protocol_partitions_and_is_deterministic() {
        let (cls, test, reg) = setup();
        let cfg = EvalConfig { n_test: 40, batch: 16, ..Default::default() };
        let prov = ReportProvenance { label: "oracle".into(), checkpoints: [("x".into(), "y".into())].into(), seed: 0, n_test: 40 };
        let r1 = eval_full(&Oracle, &cls, &test, &reg, &cfg, prov.clone()).unwrap();
        let r2 = eval_full(&Oracle, &cls, &test, &reg, &cfg, prov).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        let g = &r1.editing["glasses+"];
        assert_eq!(g.n_a + g.n_b, test.len());
        // Editing with the identity leaves B′ = B.
        assert!(g.editing_fid_b <= 1e-3);
        assert_eq!(g.flip_rate, g.flip_rate_zero);
        assert!((g.id_similarity - 1.0).abs() < 1e-9);
        let rot = r1.rotation.as_ref().unwrap();
        assert!((rot.fid - rot.fid_zero).abs() < 1e-9);
        let tmp = tempfile::tempdir().unwrap();
        r1.write(tmp.path()).unwrap();
        assert_eq!(EvalReport::read(tmp.path()).unwrap(), r1);
        assert!(std::fs::read_to_string(tmp.path().join("report.csv")).unwrap().starts_with("direction,"));
    }

    #[test]
    fn rotation_rejects_odd_sets_and_timing_is_sane() {
        let (cls, test, reg) = setup();
        let cfg = EvalConfig::default();
        let odd = test.images.slice_batch(0, 5);
        assert!(rotation_fid(&Oracle, &cls, &odd, &odd, &reg.directions[0], &cfg).is_err());
        let t = timing(&Oracle, &test.images.slice_batch(0, 4), &reg.directions[0], 2).unwrap();
        assert!(t.single_seconds.is_finite() && t.single_seconds >= 0.0);
    }
}
