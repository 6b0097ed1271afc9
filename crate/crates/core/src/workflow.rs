//! The training and evaluation lifecycle on disk. A run directory holds
//! the dataset manifests, one checkpoint tree per component, the direction
//! registry and the metric logs:
//!
//! ```text
//! run/
//!   data/{train,test}.jsonl
//!   classifier/ gan/ encoder_e/ phase1/ phase2/     checkpoint bundles
//!   ablations/{name}/{phase1,phase2}/
//!   directions/registry.json, directions/report.json
//!   logs/*.jsonl
//! ```
//!
//! Every stage resumes from its latest bundle and refuses to start when a
//! bundle it depends on is missing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfe_tensor::{Adam, ParamStore, Scalar, Tensor};

use crate::checkpoint::{self, Bundle, BundleSpec};
use crate::classifier::{accuracy, train_classifier, Classifier, ClassifierState};
use crate::config::{Ablation, RunConfig};
use crate::directions::{registry_build, BuildReport, DirectionRegistry};
use crate::encoder_w::{train_base_encoder, BaseEncoder, EncoderState};
use crate::error::{CoreError, Result};
use crate::evalsuite::{self, EncoderBaseline, EvalReport, ImageEditor, ReportProvenance};
use crate::feature_editor::{FeatureEditor, Pipeline, PipelineOptions};
use crate::inverter::Inverter;
use crate::metrics::{truncate_log, MetricsLog};
use crate::objectives::toy_fid;
use crate::rng;
use crate::stylegen::{pretrain_gan, Discriminator, GanState, Generator, WPlusLatent};
use crate::toyworld::{build_manifest, read_manifest, write_manifest, RenderedSet, Split};
use crate::trainer::{train_phase1, train_phase2, FreezeReport, Frozen, Phase1State, Phase2State};

/// Config sections as compared when resuming. Step counts and the log or
/// checkpoint cadence may change between invocations (to extend a run);
/// everything that shapes an individual step has to match.
mod resume_key {
    use crate::classifier::ClassifierConfig;
    use crate::encoder_w::BaseEncoderConfig;
    use crate::stylegen::{GanTrainConfig, GeneratorConfig};
    use crate::trainer::TrainConfig;

    pub fn classifier(c: &ClassifierConfig) -> ClassifierConfig {
        ClassifierConfig { steps: 0, log_every: 0, ..c.clone() }
    }

    pub fn generator(c: &GeneratorConfig) -> GeneratorConfig {
        let pretrain = GanTrainConfig { steps: 0, log_every: 0, checkpoint_every: 0, ..c.pretrain.clone() };
        GeneratorConfig { pretrain, ..c.clone() }
    }

    pub fn encoder(c: &BaseEncoderConfig) -> BaseEncoderConfig {
        BaseEncoderConfig { steps: 0, log_every: 0, checkpoint_every: 0, ..c.clone() }
    }

    pub fn train(c: &TrainConfig) -> TrainConfig {
        TrainConfig { phase1_steps: 0, phase2_steps: 0, log_every: 0, checkpoint_every: 0, ..c.clone() }
    }
}

/// The full model or one ablation of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    Ablated(Ablation),
}

impl Variant {
    pub fn label(self) -> String {
        match self {
            Self::Full => "full".into(),
            Self::Ablated(a) => a.name().into(),
        }
    }

    pub fn config(self, base: &RunConfig) -> Result<RunConfig> {
        match self {
            Self::Full => Ok(base.clone()),
            Self::Ablated(a) => base.ablated(a),
        }
    }

    pub fn phase1_component(self) -> String {
        match self {
            Self::Ablated(a) if a.retrains_phase1() => format!("ablations/{}/phase1", a.name()),
            _ => "phase1".into(),
        }
    }

    /// `None` when the variant has no editor to train.
    pub fn phase2_component(self) -> Option<String> {
        match self {
            Self::Full => Some("phase2".into()),
            Self::Ablated(Ablation::NoH) => None,
            Self::Ablated(a) => Some(format!("ablations/{}/phase2", a.name())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub steps: usize,
    pub test_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanSummary {
    pub steps: usize,
    pub toy_fid: f64,
    pub threshold: f64,
}

/// Components loaded for inference.
pub struct Loaded<T: Scalar> {
    pub config: RunConfig,
    pub generator: Generator<T>,
    pub encoder: BaseEncoder<T>,
    pub classifier: Classifier<T>,
    pub registry: DirectionRegistry,
    pub inverter: Inverter<T>,
    pub editor: FeatureEditor<T>,
    pub options: PipelineOptions,
    /// Bundle ids by component.
    pub checkpoints: BTreeMap<String, String>,
}

impl<T: Scalar> Loaded<T> {
    pub fn pipeline(&self) -> Pipeline<'_, T> {
        Pipeline {
            generator: &self.generator,
            encoder: &self.encoder,
            inverter: &self.inverter,
            editor: &self.editor,
            options: self.options,
        }
    }

    pub fn baseline(&self) -> EncoderBaseline<'_, T> {
        EncoderBaseline { generator: &self.generator, encoder: &self.encoder }
    }
}

/// A run directory and the configuration it is driven with.
pub struct Run {
    pub root: PathBuf,
    pub config: RunConfig,
}

fn load_into<T: Scalar>(b: &Bundle, name: &str, target: &mut ParamStore<T>) -> Result<()> {
    *target = b.store_like(name, target)?;
    Ok(())
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { root: root.into(), config })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn registry_path(&self) -> PathBuf {
        self.root.join("directions").join("registry.json")
    }

    pub fn log_path(&self, component: &str) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", component.replace('/', "-")))
    }

    /// Opens the component's log with records past `keep_below` dropped, so
    /// a resumed run appends exactly where the checkpoint left off.
    fn open_log(&self, component: &str, phase: &str, keep_below: usize) -> Result<MetricsLog> {
        let p = self.log_path(component);
        truncate_log(&p, phase, keep_below)?;
        MetricsLog::append(&p)
    }

    #[allow(clippy::too_many_arguments)]
    fn save<T: Scalar>(
        &self,
        component: &str,
        step: usize,
        seed: u64,
        config: &RunConfig,
        parents: &[&Bundle],
        stores: Vec<(&str, &ParamStore<T>)>,
        optimizers: Vec<(&str, &Adam<T>)>,
    ) -> Result<()> {
        let spec = BundleSpec {
            component,
            step,
            seed,
            config,
            parents: parents.iter().map(|b| b.id().to_string()).collect(),
            stores,
            optimizers,
        };
        checkpoint::write_bundle(&self.root, &spec).map(|_| ())
    }

    // ---- data ----

    pub fn data_build(&self, seed: u64) -> Result<DataSummary> {
        let d = &self.config.data;
        let dir = self.data_dir();
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        write_manifest(&dir.join("train.jsonl"), &build_manifest(d.train_size, seed, Split::Train, &d.priors)?)?;
        write_manifest(&dir.join("test.jsonl"), &build_manifest(d.test_size, seed, Split::Test, &d.priors)?)?;
        Ok(DataSummary { train: d.train_size, test: d.test_size, seed })
    }

    /// The rendered split; the test split is cut to `eval.n_test`.
    pub fn dataset<T: Scalar>(&self, split: Split) -> Result<RenderedSet<T>> {
        let name = match split {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        };
        let p = self.data_dir().join(name);
        if !p.exists() {
            return Err(CoreError::MissingCheckpoint(p));
        }
        let mut entries = read_manifest(&p)?;
        if split == Split::Test {
            entries.truncate(self.config.eval.n_test);
        }
        RenderedSet::new(entries, self.config.generator.image_resolution)
    }

    // ---- classifier ----

    pub fn classifier_train<T: Scalar>(&self, seed: u64, steps: Option<usize>) -> Result<ClassifierSummary> {
        let cfg = &self.config.classifier;
        let until = steps.unwrap_or(cfg.steps);
        let mut st = ClassifierState::<T>::new(cfg.clone())?;
        if let Some(b) = checkpoint::latest(&self.root, "classifier")? {
            checkpoint::check_section(&b, "classifier", &resume_key::classifier(&b.config()?.classifier), &resume_key::classifier(cfg))?;
            load_into(&b, "classifier", &mut st.net.params)?;
            st.opt = b.optimizer("classifier")?;
            st.step = b.step();
        }
        if st.step < until {
            let train = self.dataset::<T>(Split::Train)?;
            let attrs: Vec<_> = train.entries.iter().map(|e| e.attrs).collect();
            let mut log = self.open_log("classifier", "classifier", st.step + 1)?;
            train_classifier(&mut st, &train.images, &attrs, seed, until, &mut log)?;
            self.save("classifier", st.step, seed, &self.config, &[], vec![("classifier", &st.net.params)], vec![(
                "classifier",
                &st.opt,
            )])?;
        }
        let test = self.dataset::<T>(Split::Test)?;
        let attrs: Vec<_> = test.entries.iter().map(|e| e.attrs).collect();
        let acc = accuracy(&st.net, &test.images, &attrs)?;
        let names = crate::toyworld::ATTRIBUTE_NAMES;
        Ok(ClassifierSummary { steps: st.step, test_accuracy: names.iter().map(|n| n.to_string()).zip(acc).collect() })
    }

    pub fn load_classifier<T: Scalar>(&self) -> Result<(Classifier<T>, Bundle)> {
        let b = checkpoint::require(&self.root, "classifier")?;
        let mut net = Classifier::new(self.config.classifier.clone())?;
        load_into(&b, "classifier", &mut net.params)?;
        Ok((net, b))
    }

    // ---- generator ----

    /// Trains the GAN, estimates the mean style and gates the result on
    /// toy-FID against the training images.
    pub fn gan_train<T: Scalar>(&self, seed: u64, steps: Option<usize>) -> Result<GanSummary> {
        let gcfg = &self.config.generator;
        let until = steps.unwrap_or(gcfg.pretrain.steps);
        let (cls, cls_b) = self.load_classifier::<T>()?;
        let mut st = GanState::<T>::new(gcfg)?;
        let latest = checkpoint::latest(&self.root, "gan")?;
        if let Some(b) = &latest {
            checkpoint::check_section(b, "generator", &resume_key::generator(&b.config()?.generator), &resume_key::generator(gcfg))?;
            load_into(b, "g", &mut st.g.params)?;
            load_into(b, "generator", &mut st.g_ema.params)?;
            load_into(b, "d", &mut st.d.params)?;
            st.opt_g = b.optimizer("g")?;
            st.opt_d = b.optimizer("d")?;
            st.step = b.step();
        }
        let train = self.dataset::<T>(Split::Train)?;
        if st.step < until || latest.is_none() {
            let mut log = self.open_log("gan", "gan", st.step)?;
            let save = |st: &GanState<T>| {
                self.save(
                    "gan",
                    st.step,
                    seed,
                    &self.config,
                    &[&cls_b],
                    vec![("generator", &st.g_ema.params), ("g", &st.g.params), ("d", &st.d.params)],
                    vec![("g", &st.opt_g), ("d", &st.opt_d)],
                )
            };
            pretrain_gan(&mut st, &train.images, seed, until, &mut log, save)?;
            st.g_ema.estimate_w_avg(gcfg.pretrain.w_avg_samples, rand::RngCore::next_u64(&mut rng::derived(seed, "w_avg")));
            save(&st)?;
        }
        let fid = self.generator_fid(&st.g_ema, &cls, &train.images, seed)?;
        let summary = GanSummary { steps: st.step, toy_fid: fid, threshold: gcfg.pretrain.fid_threshold };
        if !(fid <= gcfg.pretrain.fid_threshold) {
            return Err(CoreError::QualityGate(format!(
                "generator toy-FID {fid:.3} exceeds the threshold {}",
                gcfg.pretrain.fid_threshold
            )));
        }
        Ok(summary)
    }

    /// Toy-FID between `fid_samples` generated and as many training images.
    pub fn generator_fid<T: Scalar>(&self, g: &Generator<T>, cls: &Classifier<T>, real: &Tensor<T>, seed: u64) -> Result<f64> {
        let n = self.config.generator.pretrain.fid_samples.min(real.dim(0));
        let mut rng = rng::derived(seed, "gan-fid");
        let mut fakes = Vec::new();
        let mut done = 0;
        while done < n {
            let m = 50.min(n - done);
            let w = g.sample_w(m, &mut rng);
            fakes.push(g.synthesize(&WPlusLatent::broadcast(&w, g.num_layers())?)?);
            done += m;
        }
        toy_fid(cls, &real.slice_batch(0, n), &Tensor::cat_batch(&fakes)?)
    }

    pub fn load_generator<T: Scalar>(&self) -> Result<(Generator<T>, Bundle)> {
        let b = checkpoint::require(&self.root, "gan")?;
        let mut g = Generator::new(self.config.generator.clone())?;
        load_into(&b, "generator", &mut g.params)?;
        Ok((g, b))
    }

    // ---- base encoder ----

    pub fn encoder_e_train<T: Scalar>(&self, seed: u64, steps: Option<usize>) -> Result<usize> {
        let cfg = &self.config.encoder_e;
        let until = steps.unwrap_or(cfg.steps);
        let (g, g_b) = self.load_generator::<T>()?;
        let (cls, cls_b) = self.load_classifier::<T>()?;
        let mut st = EncoderState::new(BaseEncoder::for_generator(cfg.clone(), &g)?);
        if let Some(b) = checkpoint::latest(&self.root, "encoder_e")? {
            checkpoint::check_section(&b, "encoder_e", &resume_key::encoder(&b.config()?.encoder_e), &resume_key::encoder(cfg))?;
            load_into(&b, "encoder_e", &mut st.net.params)?;
            st.opt = b.optimizer("encoder_e")?;
            st.step = b.step();
        }
        if st.step < until {
            let train = self.dataset::<T>(Split::Train)?;
            let mut log = self.open_log("encoder_e", "encoder_e", st.step + 1)?;
            let save = |st: &EncoderState<T>| {
                self.save(
                    "encoder_e",
                    st.step,
                    seed,
                    &self.config,
                    &[&g_b, &cls_b],
                    vec![("encoder_e", &st.net.params)],
                    vec![("encoder_e", &st.opt)],
                )
            };
            train_base_encoder(&mut st, &g, &cls, &self.config.train.loss, &train.images, seed, until, &mut log, save)?;
            save(&st)?;
        }
        Ok(st.step)
    }

    pub fn load_encoder<T: Scalar>(&self, g: &Generator<T>) -> Result<(BaseEncoder<T>, Bundle)> {
        let b = checkpoint::require(&self.root, "encoder_e")?;
        let mut e = BaseEncoder::for_generator(self.config.encoder_e.clone(), g)?;
        load_into(&b, "encoder_e", &mut e.params)?;
        Ok((e, b))
    }

    // ---- directions ----

    pub fn directions_fit<T: Scalar>(&self, seed: u64) -> Result<(DirectionRegistry, BuildReport)> {
        let (g, _) = self.load_generator::<T>()?;
        let (e, _) = self.load_encoder(&g)?;
        let (cls, _) = self.load_classifier::<T>()?;
        let train = self.dataset::<T>(Split::Train)?;
        let cfg = &self.config.directions;
        let calib = train.images.slice_batch(0, cfg.calibration_images.min(train.len()));
        let (reg, report) = registry_build(&g, &e, &cls, &calib, cfg, &mut rng::derived(seed, "directions"))?;
        let p = self.registry_path();
        let dir = p.parent().expect("registry path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        reg.save(&p)?;
        let rp = dir.join("report.json");
        std::fs::write(&rp, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| CoreError::io(&rp, e))?;
        Ok((reg, report))
    }

    pub fn load_registry(&self) -> Result<DirectionRegistry> {
        let p = self.registry_path();
        if !p.exists() {
            return Err(CoreError::MissingCheckpoint(p));
        }
        DirectionRegistry::load(&p)
    }

    // ---- phase 1 ----

    fn new_inverter<T: Scalar>(vc: &RunConfig) -> Result<Inverter<T>> {
        Inverter::new(vc.inverter.clone(), &vc.generator, !vc.train.ablation.no_fuser)
    }

    pub fn phase1_train<T: Scalar>(&self, variant: Variant, seed: u64, steps: Option<usize>) -> Result<FreezeReport> {
        let vc = variant.config(&self.config)?;
        let comp = variant.phase1_component();
        let until = steps.unwrap_or(vc.train.phase1_steps);
        let (g, g_b) = self.load_generator::<T>()?;
        let (cls, cls_b) = self.load_classifier::<T>()?;
        let mut d = Discriminator::new(vc.generator.clone())?;
        if !vc.train.reset_disc {
            load_into(&g_b, "d", &mut d.params)?;
        }
        let mut st = Phase1State::new(Self::new_inverter(&vc)?, d, &vc.train);
        if let Some(b) = checkpoint::latest(&self.root, &comp)? {
            let stored = b.config()?;
            checkpoint::check_section(&b, "inverter", &stored.inverter, &vc.inverter)?;
            checkpoint::check_section(&b, "train", &resume_key::train(&stored.train), &resume_key::train(&vc.train))?;
            load_into(&b, "inverter", &mut st.inv.params)?;
            load_into(&b, "disc", &mut st.d.params)?;
            st.opt_i = b.optimizer("inverter")?;
            st.opt_d = b.optimizer("disc")?;
            st.step = b.step();
        }
        let before = FreezeReport::capture(&[("generator", &g.params)]);
        if st.step >= until {
            return Ok(FreezeReport { after: before.clone(), before });
        }
        let train = self.dataset::<T>(Split::Train)?;
        let mut log = self.open_log(&comp, "phase1", st.step + 1)?;
        let save = |st: &Phase1State<T>| {
            self.save(
                &comp,
                st.step,
                seed,
                &vc,
                &[&g_b, &cls_b],
                vec![("inverter", &st.inv.params), ("disc", &st.d.params)],
                vec![("inverter", &st.opt_i), ("disc", &st.opt_d)],
            )
        };
        let mut tc = vc.train.clone();
        tc.seed = seed;
        let report = train_phase1(&mut st, &g, &cls, &tc, &train.images, until, &mut log, save)?;
        save(&st)?;
        Ok(report)
    }

    fn load_inverter<T: Scalar>(&self, variant: Variant, vc: &RunConfig) -> Result<(Inverter<T>, Bundle)> {
        let b = checkpoint::require(&self.root, &variant.phase1_component())?;
        let mut inv = Self::new_inverter(vc)?;
        load_into(&b, "inverter", &mut inv.params)?;
        Ok((inv, b))
    }

    // ---- phase 2 ----

    pub fn phase2_train<T: Scalar>(&self, variant: Variant, seed: u64, steps: Option<usize>) -> Result<FreezeReport> {
        let vc = variant.config(&self.config)?;
        let comp = variant
            .phase2_component()
            .ok_or_else(|| CoreError::Invalid(format!("variant `{}` trains no feature editor", variant.label())))?;
        let until = steps.unwrap_or(vc.train.phase2_steps);
        let (g, g_b) = self.load_generator::<T>()?;
        let (cls, cls_b) = self.load_classifier::<T>()?;
        let (inv, inv_b) = self.load_inverter::<T>(variant, &vc)?;
        let (e, e_b) = self.load_encoder(&g)?;
        let reg = self.load_registry()?;
        let mut d = Discriminator::new(vc.generator.clone())?;
        if !vc.train.reset_disc {
            load_into(&inv_b, "disc", &mut d.params)?;
        }
        let h = FeatureEditor::new(vc.feature_editor.clone(), &vc.generator, inv.k())?;
        let mut st = Phase2State::new(h, d, &vc.train);
        if let Some(b) = checkpoint::latest(&self.root, &comp)? {
            let stored = b.config()?;
            checkpoint::check_section(&b, "feature_editor", &stored.feature_editor, &vc.feature_editor)?;
            checkpoint::check_section(&b, "train", &resume_key::train(&stored.train), &resume_key::train(&vc.train))?;
            load_into(&b, "editor", &mut st.h.params)?;
            load_into(&b, "disc", &mut st.d.params)?;
            st.opt_h = b.optimizer("editor")?;
            st.opt_d = b.optimizer("disc")?;
            st.step = b.step();
        }
        let frozen = [("generator", &g.params), ("encoder_e", &e.params), ("inverter", &inv.params)];
        if st.step >= until {
            let c = FreezeReport::capture(&frozen);
            return Ok(FreezeReport { after: c.clone(), before: c });
        }
        let directions = reg.training_set(vc.train.ablation.d_small)?;
        let train = self.dataset::<T>(Split::Train)?;
        let mut log = self.open_log(&comp, "phase2", st.step + 1)?;
        let save = |st: &Phase2State<T>| {
            self.save(
                &comp,
                st.step,
                seed,
                &vc,
                &[&g_b, &cls_b, &inv_b, &e_b],
                vec![("editor", &st.h.params), ("disc", &st.d.params)],
                vec![("editor", &st.opt_h), ("disc", &st.opt_d)],
            )
        };
        let mut tc = vc.train.clone();
        tc.seed = seed;
        let fz = Frozen { g: &g, e: &e, inv: &inv, critic: &cls };
        let report = train_phase2(&mut st, &fz, &directions, &tc, &train.images, until, &mut log, save)?;
        save(&st)?;
        Ok(report)
    }

    // ---- inference ----

    /// Loads everything a variant needs for inference.
    pub fn load<T: Scalar>(&self, variant: Variant) -> Result<Loaded<T>> {
        let vc = variant.config(&self.config)?;
        let registry = self.load_registry()?;
        let (generator, g_b) = self.load_generator::<T>()?;
        let (classifier, cls_b) = self.load_classifier::<T>()?;
        let (encoder, e_b) = self.load_encoder(&generator)?;
        let (inverter, inv_b) = self.load_inverter::<T>(variant, &vc)?;
        let mut editor = FeatureEditor::new(vc.feature_editor.clone(), &vc.generator, inverter.k())?;
        let mut checkpoints: BTreeMap<String, String> = [
            ("classifier", &cls_b),
            ("gan", &g_b),
            ("encoder_e", &e_b),
            ("phase1", &inv_b),
        ]
        .into_iter()
        .map(|(k, b)| (k.to_string(), b.id().to_string()))
        .collect();
        if let Some(comp) = variant.phase2_component() {
            let b = checkpoint::require(&self.root, &comp)?;
            load_into(&b, "editor", &mut editor.params)?;
            checkpoints.insert("phase2".into(), b.id().to_string());
        }
        let options = PipelineOptions { no_e: vc.train.ablation.no_e, no_h: variant == Variant::Ablated(Ablation::NoH) };
        Ok(Loaded { config: vc, generator, encoder, classifier, registry, inverter, editor, options, checkpoints })
    }

    /// Evaluates a variant on the test split; `baseline` swaps in the
    /// base-encoder-only editor.
    pub fn evaluate<T: Scalar>(&self, variant: Variant, baseline: bool, seed: u64, timing: bool) -> Result<EvalReport> {
        let m = self.load::<T>(variant)?;
        let test = self.dataset::<T>(Split::Test)?;
        let mut ecfg = m.config.eval.clone();
        ecfg.seed = seed;
        let pipe = m.pipeline();
        let base = m.baseline();
        let ed: &dyn ImageEditor<T> = if baseline { &base } else { &pipe };
        let label = if baseline { "encoder_e".to_string() } else { variant.label() };
        let prov = ReportProvenance { label, checkpoints: m.checkpoints.clone(), seed, n_test: test.len() };
        let mut report = evalsuite::eval_full(ed, &m.classifier, &test, &m.registry, &ecfg, prov)?;
        if timing {
            let d = m.registry.get(&ecfg.rotation_direction).or_else(|_| {
                m.registry.directions.first().ok_or_else(|| CoreError::Invalid("registry is empty".into()))
            })?;
            let n = ecfg.timing_images.min(test.len());
            report.timing = Some(evalsuite::timing(ed, &test.images.slice_batch(0, n), d, ecfg.timing_repeats)?);
        }
        Ok(report)
    }

    /// Image grid of a variant's edits on the first test images.
    pub fn grid<T: Scalar>(&self, variant: Variant, path: &Path) -> Result<()> {
        let m = self.load::<T>(variant)?;
        let test = self.dataset::<T>(Split::Test)?;
        let dirs = m.config.eval.grid_directions.iter().map(|n| m.registry.get(n)).collect::<Result<Vec<_>>>()?;
        let n = m.config.eval.grid_images.min(test.len());
        evalsuite::write_grid(&m.pipeline(), &test.images.slice_batch(0, n), &dirs, path)
    }
}
