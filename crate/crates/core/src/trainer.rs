//! The two training phases. Phase 1 trains the Inverter against a frozen
//! generator; phase 2 freezes it and trains the Feature Editor on synthetic
//! edit pairs made with the base encoder, alongside an inversion branch on
//! real images with `Δ = 0`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Scalar, Tensor};

use crate::classifier::Classifier;
use crate::directions::EditingDirection;
use crate::encoder_w::BaseEncoder;
use crate::error::{CoreError, Result};
use crate::feature_editor::FeatureEditor;
use crate::inverter::Inverter;
use crate::metrics::{MetricsLog, StepRecord};
use crate::objectives::{adversarial_d_var, compose_phase1, compose_phase2, image_loss, reg_norm_var, Critic, LossWeights};
use crate::rng;
use crate::stylegen::{Discriminator, Generator, WPlusLatent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_h: bool,
    pub no_fuser: bool,
    pub no_inv_loss: bool,
    pub no_e: bool,
    pub d_small: bool,
    /// Splice layer replacing the inverter's `k`, set by the `k_small` row.
    pub k_override: Option<usize>,
    /// Layer used by the `k_small` row.
    pub k_small: usize,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { no_h: false, no_fuser: false, no_inv_loss: false, no_e: false, d_small: false, k_override: None, k_small: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    /// Phase-1 step from which the adversarial term and D updates start.
    pub adv_start_step: usize,
    pub seed: u64,
    /// Fresh discriminator in phases 1 and 2 instead of carrying it over
    /// from the previous stage.
    pub reset_disc: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr_main: 2e-4,
            lr_disc: 1e-4,
            phase1_steps: 6000,
            phase2_steps: 3000,
            adv_start_step: 2000,
            seed: 0,
            reset_disc: false,
            log_every: 50,
            checkpoint_every: 1000,
            loss: LossWeights::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.adv_start_step >= self.phase1_steps {
            return Err(CoreError::Config(format!(
                "adv_start_step ({}) must be below phase1_steps ({})",
                self.adv_start_step, self.phase1_steps
            )));
        }
        if !(self.lr_main > 0.0 && self.lr_disc > 0.0) || !self.lr_main.is_finite() || !self.lr_disc.is_finite() {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if self.ablation.k_small + 1 >= num_layers {
            return Err(CoreError::Config(format!("k_small must be below N - 1 = {}", num_layers - 1)));
        }
        Ok(())
    }
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Diverged { step, what: format!("{what} = {v}") })
    }
}

/// Checksums of frozen components taken before and after a phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub before: BTreeMap<String, String>,
    pub after: BTreeMap<String, String>,
}

impl FreezeReport {
    pub fn capture<T: Scalar>(stores: &[(&str, &ParamStore<T>)]) -> BTreeMap<String, String> {
        stores.iter().map(|(n, s)| (n.to_string(), s.checksum())).collect()
    }

    pub fn holds(&self) -> bool {
        self.before == self.after
    }

    fn check(self) -> Result<Self> {
        if let Some((name, _)) = self.before.iter().find(|(k, v)| self.after.get(*k) != Some(v)) {
            return Err(CoreError::Invalid(format!("frozen component `{name}` changed during training")));
        }
        Ok(self)
    }
}

/// One discriminator update on real images against detached fakes.
fn disc_update<T: Scalar>(d: &mut Discriminator<T>, opt: &mut Adam<T>, real: &Tensor<T>, fakes: &Tensor<T>) -> f64 {
    let g = Graph::new();
    let pd = Bound::new(&g, &d.params, true);
    let sr = d.forward(&pd, g.constant(real.clone()));
    let sf = d.forward(&pd, g.constant(fakes.clone()));
    let loss = adversarial_d_var(sr, sf);
    let lv = loss.item().as_f64();
    let mut grads = g.backward(loss);
    let grads = pd.grads(&mut grads);
    drop(pd);
    opt.step(&mut d.params, &grads);
    lv
}

fn sample_batch<R: Rng>(rng: &mut R, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.gen_range(0..n)).collect()
}

#[derive(Debug, Clone)]
pub struct Phase1State<T: Scalar> {
    pub inv: Inverter<T>,
    pub d: Discriminator<T>,
    pub opt_i: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> Phase1State<T> {
    pub fn new(inv: Inverter<T>, d: Discriminator<T>, cfg: &TrainConfig) -> Self {
        Self {
            inv,
            d,
            opt_i: Adam::new(AdamConfig::new(cfg.lr_main)),
            opt_d: Adam::new(AdamConfig::new(cfg.lr_disc).with_betas(0.0, 0.99)),
            step: 0,
        }
    }
}

/// Trains the Inverter until `st.step == until`. Per step: invert a real
/// batch, reconstruct through the splice and from `w` alone, and update
/// the Inverter on the phase-1 loss; from `adv_start_step` on, the
/// adversarial term is included and D is updated on both fakes.
#[allow(clippy::too_many_arguments)]
pub fn train_phase1<T: Scalar>(
    st: &mut Phase1State<T>,
    g: &Generator<T>,
    critic: &Classifier<T>,
    cfg: &TrainConfig,
    images: &Tensor<T>,
    until: usize,
    log: &mut MetricsLog,
    mut checkpoint: impl FnMut(&Phase1State<T>) -> Result<()>,
) -> Result<FreezeReport> {
    let n = images.dim(0);
    if n == 0 {
        return Err(CoreError::Invalid("phase 1 needs images".into()));
    }
    let before = FreezeReport::capture(&[("generator", &g.params)]);
    let k = st.inv.k();
    while st.step < until {
        let step = st.step;
        let adv_on = step >= cfg.adv_start_step;
        let mut rng = rng::stream(cfg.seed, "phase1", step as u64);
        let x = images.select_batch(&sample_batch(&mut rng, n, cfg.batch_size));
        let graph = Graph::new();
        let pi = Bound::new(&graph, &st.inv.params, true);
        let pg = Bound::new(&graph, &g.params, false);
        let pd = Bound::new(&graph, &st.d.params, false);
        let c = Critic::new(&graph, critic);
        let xv = graph.constant(x.clone());
        let out = st.inv.forward(&pi, &pg, g, xv);
        let n_layers = g.num_layers();
        let tail = out.w.slice1(k + 1, n_layers);
        let x_hat = g.forward_from(&pg, out.f_k, k, tail);
        let x_w = g.forward(&pg, out.w);
        let target = c.target(xv);
        let score = |img| if adv_on { Some(st.d.forward(&pd, img)) } else { None };
        let fused = c.terms(&target, x_hat, score(x_hat));
        let w_only = c.terms(&target, x_w, score(x_w));
        let parts = compose_phase1(fused, w_only, reg_norm_var(out.f_k), &cfg.loss);
        let b = parts.breakdown();
        finite(step, "phase1 loss", b.total)?;
        let fakes = adv_on.then(|| Tensor::cat_batch(&[x_hat.tensor(), x_w.tensor()]));
        let mut grads = graph.backward(parts.total);
        let grads = pi.grads(&mut grads);
        drop((pi, pg, pd, c));
        st.opt_i.step(&mut st.inv.params, &grads);
        let mut rec = StepRecord::new("phase1", step + 1);
        for (name, v) in b.entries() {
            rec.values.insert(name.to_string(), v);
        }
        if let Some(f) = fakes {
            let real = Tensor::cat_batch(&[x.clone(), x])?;
            let dl = disc_update(&mut st.d, &mut st.opt_d, &real, &f?);
            rec.values.insert("d_loss".into(), finite(step, "phase1 d_loss", dl)?);
        }
        st.step += 1;
        if st.step % cfg.log_every.max(1) == 0 || st.step == until {
            log.write(&rec)?;
        }
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < until {
            log.flush()?;
            checkpoint(st)?;
        }
    }
    log.flush()?;
    let after = FreezeReport::capture(&[("generator", &g.params)]);
    FreezeReport { before, after }.check()
}

/// A synthetic training pair: `X_E = G(w_E)`, `X_E′ = G(w_E′)` and
/// `Δ = F_L(w_E) − F_L(w_E′)`.
#[derive(Debug, Clone)]
pub struct EditPair<T: Scalar> {
    pub w_e: WPlusLatent<T>,
    pub w_e_edited: WPlusLatent<T>,
    pub x_e: Tensor<T>,
    pub x_e_edited: Tensor<T>,
    pub delta: Tensor<T>,
}

/// `w + p_i d_i` per sample; rows with zero power are copied untouched.
pub fn edit_per_sample<T: Scalar>(w: &WPlusLatent<T>, edits: &[(&EditingDirection, f64)]) -> Result<WPlusLatent<T>> {
    let (b, n, d) = (w.batch(), w.num_layers(), w.style_dim());
    if edits.len() != b {
        return Err(CoreError::Shape(format!("{} edits for a batch of {b}", edits.len())));
    }
    let mut t = w.tensor().clone();
    for (chunk, (dir, p)) in t.data_mut().chunks_mut(n * d).zip(edits) {
        dir.validate(n, d)?;
        if *p != 0.0 {
            for (x, o) in chunk.iter_mut().zip(dir.offset(n, d, *p)) {
                *x += T::lit(o);
            }
        }
    }
    WPlusLatent::new(t)
}

/// Builds the pair for latents `w_e` (from E, or from the Inverter in the
/// no-E ablation) with one edit per sample.
pub fn make_edit_pair<T: Scalar>(
    g: &Generator<T>,
    w_e: &WPlusLatent<T>,
    edits: &[(&EditingDirection, f64)],
    layer: usize,
) -> Result<EditPair<T>> {
    let w_e_edited = edit_per_sample(w_e, edits)?;
    g.check_layer(layer)?;
    let graph = Graph::new();
    let pg = Bound::new(&graph, &g.params, false);
    let run = |w: &WPlusLatent<T>| {
        let (img, f) = g.forward_taps(&pg, graph.constant(w.tensor().clone()), &[layer]);
        (img.tensor(), f[0].tensor())
    };
    let (x_e, fa) = run(w_e);
    let (x_e_edited, fb) = run(&w_e_edited);
    Ok(EditPair { delta: fa.sub(&fb), w_e: w_e.clone(), w_e_edited, x_e, x_e_edited })
}

/// Draws one training direction and one of its powers per sample, uniformly.
pub fn sample_edits<'d, R: Rng>(rng: &mut R, set: &[&'d EditingDirection], b: usize) -> Vec<(&'d EditingDirection, f64)> {
    (0..b)
        .map(|_| {
            let d = set[rng.gen_range(0..set.len())];
            let p = d.default_powers[rng.gen_range(0..d.default_powers.len())];
            (d, p)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Phase2State<T: Scalar> {
    pub h: FeatureEditor<T>,
    pub d: Discriminator<T>,
    pub opt_h: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> Phase2State<T> {
    pub fn new(h: FeatureEditor<T>, d: Discriminator<T>, cfg: &TrainConfig) -> Self {
        Self {
            h,
            d,
            opt_h: Adam::new(AdamConfig::new(cfg.lr_main)),
            opt_d: Adam::new(AdamConfig::new(cfg.lr_disc).with_betas(0.0, 0.99)),
            step: 0,
        }
    }
}

/// Frozen components of phase 2.
pub struct Frozen<'a, T: Scalar> {
    pub g: &'a Generator<T>,
    pub e: &'a BaseEncoder<T>,
    pub inv: &'a Inverter<T>,
    pub critic: &'a Classifier<T>,
}

/// Trains H until `st.step == until`. Editing branch: sample one direction
/// and power per image, build the synthetic pair from E's latents, invert
/// `X_E`, edit its features with `Δ` and match `X_E′` (no adversarial term).
/// Inversion branch: invert the real batch with `Δ = 0` and match it, with
/// the adversarial term; dropped under `no_inv_loss`. Only H and D change.
pub fn train_phase2<T: Scalar>(
    st: &mut Phase2State<T>,
    fz: &Frozen<'_, T>,
    directions: &[&EditingDirection],
    cfg: &TrainConfig,
    images: &Tensor<T>,
    until: usize,
    log: &mut MetricsLog,
    mut checkpoint: impl FnMut(&Phase2State<T>) -> Result<()>,
) -> Result<FreezeReport> {
    let n = images.dim(0);
    if n == 0 || directions.is_empty() {
        return Err(CoreError::Invalid("phase 2 needs images and at least one direction".into()));
    }
    if st.h.k() != fz.inv.k() {
        return Err(CoreError::Incompatible(format!("editor at layer {} but inverter at {}", st.h.k(), fz.inv.k())));
    }
    let frozen = [("generator", &fz.g.params), ("encoder_e", &fz.e.params), ("inverter", &fz.inv.params)];
    let before = FreezeReport::capture(&frozen);
    let (g, k) = (fz.g, fz.inv.k());
    let inv_branch = !cfg.ablation.no_inv_loss;
    while st.step < until {
        let step = st.step;
        let mut rng = rng::stream(cfg.seed, "phase2", step as u64);
        let x = images.select_batch(&sample_batch(&mut rng, n, cfg.batch_size));
        let edits = sample_edits(&mut rng, directions, cfg.batch_size);
        let (w_i, f_i) = fz.inv.invert(g, &x)?;
        let w_src = if cfg.ablation.no_e { w_i.clone() } else { fz.e.encode(&x, g.w_avg())? };
        let pair = make_edit_pair(g, &w_src, &edits, st.h.source_layer())?;
        let (w_inv, f_inv) = fz.inv.invert(g, &pair.x_e)?;
        let w_inv_edited = edit_per_sample(&w_inv, &edits)?;

        let graph = Graph::new();
        let ph = Bound::new(&graph, &st.h.params, true);
        let pg = Bound::new(&graph, &g.params, false);
        let pd = Bound::new(&graph, &st.d.params, false);
        let c = Critic::new(&graph, fz.critic);
        let f_edit = st.h.forward(&ph, graph.constant(f_inv.values), graph.constant(pair.delta));
        let x_edit = g.forward_from(&pg, f_edit, k, graph.constant(w_inv_edited.tail(k)));
        let edit = c.terms(&c.target(graph.constant(pair.x_e_edited)), x_edit, None);
        let mut x_rec = None;
        let inv = inv_branch.then(|| {
            let zeros = graph.constant(Tensor::zeros(&delta_shape(g, st.h.source_layer(), x.dim(0))));
            let f_rec = st.h.forward(&ph, graph.constant(f_i.values.clone()), zeros);
            let rec = g.forward_from(&pg, f_rec, k, graph.constant(w_i.tail(k)));
            x_rec = Some(rec);
            c.terms(&c.target(graph.constant(x.clone())), rec, Some(st.d.forward(&pd, rec)))
        });
        let parts = compose_phase2(edit, inv, &cfg.loss);
        let b = parts.breakdown();
        finite(step, "phase2 loss", b.total)?;
        let edit_total = image_loss(edit, &cfg.loss).total.item().as_f64();
        let inv_total = inv.map_or(0.0, |t| image_loss(t, &cfg.loss).total.item().as_f64());
        let mut grads = graph.backward(parts.total);
        let grads = ph.grads(&mut grads);
        let fakes = x_rec.map(|r| Tensor::cat_batch(&[r.tensor(), x_edit.tensor()]));
        drop((ph, pg, pd, c));
        st.opt_h.step(&mut st.h.params, &grads);
        let mut rec = StepRecord::new("phase2", step + 1).with("edit_total", edit_total).with("inv_total", inv_total);
        for (name, v) in b.entries() {
            rec.values.insert(name.to_string(), v);
        }
        if let Some(f) = fakes {
            let real = Tensor::cat_batch(&[x.clone(), x])?;
            let dl = disc_update(&mut st.d, &mut st.opt_d, &real, &f?);
            rec.values.insert("d_loss".into(), finite(step, "phase2 d_loss", dl)?);
        }
        st.step += 1;
        if st.step % cfg.log_every.max(1) == 0 || st.step == until {
            log.write(&rec)?;
        }
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < until {
            log.flush()?;
            checkpoint(st)?;
        }
    }
    log.flush()?;
    let after = FreezeReport::capture(&frozen);
    FreezeReport { before, after }.check()
}

fn delta_shape<T: Scalar>(g: &Generator<T>, layer: usize, b: usize) -> [usize; 4] {
    let s = crate::stylegen::layer_resolution(layer);
    [b, g.config.layer_channels(layer), s, s]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::directions::DirectionSource;
    use crate::encoder_w::BaseEncoderConfig;
    use crate::feature_editor::FeatureEditorConfig;
    use crate::inverter::InverterConfig;
    use crate::stylegen::GeneratorConfig;

    fn gcfg() -> GeneratorConfig {
        GeneratorConfig { style_dim: 8, base_channels: 8, image_resolution: 32, mapping_layers: 1, ..Default::default() }
    }

    fn small_inverter(g: &GeneratorConfig, fuse: bool) -> Inverter<f64> {
        let icfg = InverterConfig {
            backbone_stage_channels: [4, 6, 6, 8],
            backbone_strides: [2, 1, 1, 2],
            blocks_per_stage: 1,
            predictor_blocks: 1,
            fuser_blocks: 1,
            w_head_hidden: 8,
            ..Default::default()
        };
        Inverter::new(icfg, g, fuse).unwrap()
    }

    fn classifier() -> Classifier<f64> {
        Classifier::new(ClassifierConfig { channels: [4, 4, 4, 4], embed_dim: 8, ..Default::default() }).unwrap()
    }

    fn tcfg() -> TrainConfig {
        TrainConfig { batch_size: 2, phase1_steps: 4, phase2_steps: 3, adv_start_step: 2, log_every: 1, ..Default::default() }
    }

    fn images() -> Tensor<f64> {
        Tensor::uniform(&[6, 3, 32, 32], -1.0, 1.0, &mut rng::derived(0, "imgs"))
    }

    fn dirs() -> Vec<EditingDirection> {
        (0..3)
            .map(|i| {
                let mut v = vec![0.0; 8];
                v[i] = 1.0;
                let mut d = EditingDirection::new(format!("d{i}"), v, DirectionSource::Probe).unwrap();
                d.default_powers = vec![0.5, 1.0, 1.5];
                d
            })
            .collect()
    }

    fn run_phase1(until: usize, resume_at: Option<usize>) -> (Phase1State<f64>, Vec<StepRecord>, FreezeReport) {
        let g = Generator::<f64>::new(gcfg()).unwrap();
        let cls = classifier();
        let cfg = tcfg();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.jsonl");
        let mut st = Phase1State::new(small_inverter(&g.config, true), Discriminator::new(gcfg()).unwrap(), &cfg);
        if let Some(s) = resume_at {
            let mut log = MetricsLog::append(&path).unwrap();
            train_phase1(&mut st, &g, &cls, &cfg, &images(), s, &mut log, |_| Ok(())).unwrap();
            // Round trip through disk as a resumed process would.
            st.inv.params = ParamStore::from_bytes(&st.inv.params.to_bytes().unwrap()).unwrap();
            st.opt_i.save(tmp.path(), "oi").unwrap();
            st.opt_i = Adam::load(tmp.path(), "oi").unwrap();
        }
        let mut log = MetricsLog::append(&path).unwrap();
        let fr = train_phase1(&mut st, &g, &cls, &cfg, &images(), until, &mut log, |_| Ok(())).unwrap();
        drop(log);
        (st, crate::metrics::read_log(&path).unwrap(), fr)
    }

    #[test]
    fn phase1_freezes_g_schedules_adv_and_is_deterministic() {
        let (a, log_a, fr) = run_phase1(4, None);
        assert!(fr.holds());
        assert_eq!(fr.before.len(), 1);
        assert_eq!(log_a.len(), 4);
        for r in &log_a {
            let adv = r.get("adv").unwrap();
            if r.step <= 2 {
                assert_eq!(adv, 0.0);
                assert!(r.get("d_loss").is_none());
            } else {
                assert!(adv > 0.0);
                assert!(r.get("d_loss").is_some());
            }
        }
        let (b, log_b, _) = run_phase1(4, None);
        assert_eq!(log_a, log_b);
        assert_eq!(a.inv.params, b.inv.params);
        let (c, log_c, _) = run_phase1(4, Some(2));
        assert_eq!(log_c.len(), 4);
        for (x, y) in log_a.iter().zip(&log_c) {
            for (k, v) in &x.values {
                let w = y.values[k];
                assert!((v - w).abs() <= 1e-5 * v.abs().max(1e-12), "{k}: {v} vs {w}");
            }
        }
        assert_eq!(a.inv.params, c.inv.params);
    }

    #[test]
    fn edit_pair_definition() {
        let g = Generator::<f64>::new(gcfg()).unwrap();
        let ds = dirs();
        let w = WPlusLatent::broadcast(&g.sample_w(2, &mut rng::derived(1, "w")), g.num_layers()).unwrap();
        let zero = make_edit_pair(&g, &w, &[(&ds[0], 0.0), (&ds[1], 0.0)], 5).unwrap();
        assert_eq!(zero.x_e, zero.x_e_edited);
        assert!(zero.delta.data().iter().all(|&v| v == 0.0));
        let p = make_edit_pair(&g, &w, &[(&ds[0], 1.0), (&ds[2], -2.0)], 5).unwrap();
        assert_eq!(p.x_e, g.synthesize(&w).unwrap());
        assert_eq!(p.x_e_edited, g.synthesize(&p.w_e_edited).unwrap());
        let manual = g.synthesize_partial(&w, 5).unwrap().values.sub(&g.synthesize_partial(&p.w_e_edited, 5).unwrap().values);
        assert_eq!(p.delta, manual);
        assert_eq!(p.delta.shape(), &[2, g.config.layer_channels(5), 16, 16]);
        assert!(make_edit_pair(&g, &w, &[(&ds[0], 1.0)], 5).is_err());
    }

    #[test]
    fn direction_sampling_is_uniform() {
        let ds: Vec<EditingDirection> = (0..14)
            .map(|i| {
                let mut v = vec![0.0; 8];
                v[i % 8] = if i < 8 { 1.0 } else { -1.0 };
                EditingDirection::new(format!("d{i}"), v, DirectionSource::Probe).unwrap()
            })
            .collect();
        let set: Vec<&EditingDirection> = ds.iter().collect();
        let mut counts = BTreeMap::<String, usize>::new();
        let b = 8;
        for step in 0..1000 {
            let mut r = rng::stream(0, "phase2", step);
            sample_batch(&mut r, 100, b);
            for (d, _) in sample_edits(&mut r, &set, b) {
                *counts.entry(d.name.clone()).or_default() += 1;
            }
        }
        let total = (1000 * b) as f64;
        let expect = total / ds.len() as f64;
        assert_eq!(counts.len(), ds.len());
        let mut chi2 = 0.0;
        for c in counts.values() {
            let f = *c as f64 / total;
            assert!((f - 1.0 / ds.len() as f64).abs() <= 0.05, "{f}");
            chi2 += (*c as f64 - expect).powi(2) / expect;
        }
        // 99.9th percentile of chi-square with 13 degrees of freedom.
        assert!(chi2 < 34.53, "{chi2}");
    }

    fn phase2_setup() -> (Generator<f64>, BaseEncoder<f64>, Inverter<f64>, Classifier<f64>, FeatureEditor<f64>) {
        let g = Generator::<f64>::new(gcfg()).unwrap();
        let e = BaseEncoder::for_generator(BaseEncoderConfig { base_channels: 4, hidden: 8, ..Default::default() }, &g).unwrap();
        let inv = small_inverter(&g.config, true);
        let h = FeatureEditor::new(FeatureEditorConfig { blocks: 1, hidden_channels: Some(4), ..Default::default() }, &g.config, 5)
            .unwrap();
        (g, e, inv, classifier(), h)
    }

    #[test]
    fn phase2_trains_only_h_and_d() {
        let (g, e, inv, cls, h) = phase2_setup();
        let ds = dirs();
        let set: Vec<&EditingDirection> = ds.iter().collect();
        let cfg = tcfg();
        let fz = Frozen { g: &g, e: &e, inv: &inv, critic: &cls };
        let mut st = Phase2State::new(h.clone(), Discriminator::new(gcfg()).unwrap(), &cfg);
        let d0 = st.d.params.checksum();
        let tmp = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::append(&tmp.path().join("m.jsonl")).unwrap();
        let fr = train_phase2(&mut st, &fz, &set, &cfg, &images(), 3, &mut log, |_| Ok(())).unwrap();
        assert!(fr.holds());
        assert_eq!(fr.before.keys().collect::<Vec<_>>(), ["encoder_e", "generator", "inverter"]);
        assert_ne!(st.h.params.checksum(), h.params.checksum());
        assert_ne!(st.d.params.checksum(), d0);
        let recs = crate::metrics::read_log(&tmp.path().join("m.jsonl")).unwrap();
        assert!(recs.iter().all(|r| r.get("inv_total").unwrap() > 0.0));

        // Without the inversion branch its contribution is exactly zero and
        // D stays put.
        let cfg2 = TrainConfig { ablation: AblationFlags { no_inv_loss: true, ..Default::default() }, ..tcfg() };
        let mut st2 = Phase2State::new(h, Discriminator::new(gcfg()).unwrap(), &cfg2);
        let mut log2 = MetricsLog::append(&tmp.path().join("n.jsonl")).unwrap();
        train_phase2(&mut st2, &fz, &set, &cfg2, &images(), 2, &mut log2, |_| Ok(())).unwrap();
        assert_eq!(st2.d.params.checksum(), d0);
        for r in crate::metrics::read_log(&tmp.path().join("n.jsonl")).unwrap() {
            assert_eq!(r.get("inv_total"), Some(0.0));
            assert_eq!(r.get("adv"), Some(0.0));
        }
    }
}
