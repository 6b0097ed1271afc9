//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 and 11 run on freshly built (partly tiny) models. Criteria
//! 8-10 need the full pipeline trained at `configs/acceptance.toml`; that
//! run is cached under the cargo target tmp dir and resumed or reused on
//! later invocations (`SFE_ACCEPTANCE_FRESH=1` discards it).
//!
//! The process exits 0 even when criteria fail, so `cargo test` reports
//! the verdicts without aborting the workspace run; set
//! `SFE_ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use sfe_core::classifier::{Classifier, ClassifierConfig};
use sfe_core::config::{Ablation, RunConfig};
use sfe_core::directions::{DirectionRegistry, DirectionSource, EditingDirection, SCHEMA_VERSION};
use sfe_core::encoder_w::{offset_penalty, BaseEncoder, BaseEncoderConfig};
use sfe_core::evalsuite::EvalReport;
use sfe_core::feature_editor::{
    apply_mask, compute_delta, delta_between, DeltaMap, EditRequest, FeatureEditor, FeatureEditorConfig, Pipeline,
    PipelineOptions, RegionMask,
};
use sfe_core::inverter::{Inverter, InverterConfig};
use sfe_core::metrics::read_log;
use sfe_core::objectives::{
    adversarial_d_var, adversarial_g_var, compose_phase1, compose_phase2, frechet_between, frechet_distance, l2_var,
    reg_norm_var, Critic, GaussianStats, ImageTerms, LossWeights,
};
use sfe_core::stylegen::{Generator, GeneratorConfig, WPlusLatent};
use sfe_core::toyworld::{build_manifest, AttributePriors, RenderedSet, Split, ATTRIBUTE_NAMES};
use sfe_core::workflow::{Run, Variant};
use sfe_core::{rng, CoreError};
use sfe_tensor::{gradcheck, ParamStore, Scalar, Tensor};

// Tolerances, pinned.
const SPLICE_TOL: f64 = 1e-5;
const LOSS_REL_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_PROBES: usize = 10;
const FRECHET_SAME_TOL: f64 = 1e-6;
const FRECHET_CLOSED_TOL: f64 = 1e-8;
const L2_RATIO: f64 = 0.5;
const MIN_FLIP: f64 = 0.70;
const MIN_ID: f64 = 0.5;
const MIN_GOOD_DIRECTIONS: usize = 4;
const HOLDOUT_FLIP_DROP: f64 = 0.15;
const RESUME_REL_TOL: f64 = 1e-5;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn perturb<T: Scalar>(store: &mut ParamStore<T>, std: f64, seed: u64) {
    let mut r = rng::derived(seed, "perturb");
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get(&n).unwrap();
        let noise = Tensor::randn(t.shape(), std, &mut r);
        store.insert(&n, t.add(&noise));
    }
}

fn acceptance_config() -> RunConfig {
    RunConfig::load(&repo_root().join("configs/acceptance.toml")).expect("acceptance config parses")
}

// ---------------------------------------------------------------- 1

fn splice_identity() -> Outcome {
    let t = Instant::now();
    let cfg = acceptance_config().generator;
    let mut g = Generator::<f32>::new(cfg).map_err(err)?;
    perturb(&mut g.params, 0.02, 1);
    let n = g.num_layers();
    let w = WPlusLatent::new(Tensor::randn(&[100, n, g.style_dim()], 1.0, &mut rng::derived(2, "splice"))).map_err(err)?;
    let full = g.synthesize(&w).map_err(err)?;
    let mut worst: f64 = 0.0;
    let mut layers = 0;
    // The last layer has no tail to resume into.
    for k in 0..n - 1 {
        layers += 1;
        let f = g.synthesize_partial(&w, k).map_err(err)?;
        let y = g.synthesize_from(&f, &w.tail(k)).map_err(err)?;
        worst = worst.max(full.max_abs_diff(&y) as f64);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst <= SPLICE_TOL && layers > 0 && secs < 60.0,
        format!("max diff {worst:e} over 100 w x {layers} layers in {secs:.1}s (tol {SPLICE_TOL:e}, < 60s)"),
    )
}

// ---------------------------------------------------------------- 2, 3

struct Random32 {
    g: Generator<f32>,
    e: BaseEncoder<f32>,
    inv: Inverter<f32>,
    h: FeatureEditor<f32>,
}

/// Acceptance-architecture components with every weight perturbed, so no
/// zero-initialized output layer hides a broken path.
fn random_pipeline() -> Result<Random32, String> {
    let cfg = acceptance_config();
    let mut g = Generator::<f32>::new(cfg.generator.clone()).map_err(err)?;
    perturb(&mut g.params, 0.02, 3);
    g.estimate_w_avg(500, 4);
    let mut e = BaseEncoder::for_generator(cfg.encoder_e.clone(), &g).map_err(err)?;
    perturb(&mut e.params, 0.02, 5);
    let mut inv = Inverter::new(cfg.inverter.clone(), &cfg.generator, true).map_err(err)?;
    perturb(&mut inv.params, 0.02, 6);
    let mut h = FeatureEditor::new(cfg.feature_editor.clone(), &cfg.generator, inv.k()).map_err(err)?;
    perturb(&mut h.params, 0.02, 7);
    Ok(Random32 { g, e, inv, h })
}

fn test_images(n: usize, res: usize) -> Result<Tensor<f32>, String> {
    let m = build_manifest(n, 11, Split::Test, &AttributePriors::default()).map_err(err)?;
    Ok(RenderedSet::<f32>::new(m, res).map_err(err)?.images)
}

fn zero_edit_identity(m: &Random32) -> Outcome {
    let p = Pipeline { generator: &m.g, encoder: &m.e, inverter: &m.inv, editor: &m.h, options: PipelineOptions::default() };
    let x = test_images(50, m.g.resolution())?;
    let inv = p.invert_image(&x).map_err(err)?;
    let d = EditingDirection::new("probe", vec![1.0; m.g.style_dim()], DirectionSource::Probe).map_err(err)?;
    let edited = p.edit_image(&x, EditRequest { direction: &d, power: 0.0, mask: None }).map_err(err)?;
    // The edit also has to move something at nonzero power.
    let moved = p.edit_image(&x.slice_batch(0, 2), EditRequest { direction: &d, power: 3.0, mask: None }).map_err(err)?;
    let same = inv.data().iter().zip(edited.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let moves = moved.max_abs_diff(&inv.slice_batch(0, 2)) > 0.0;
    ensure(same && moves, format!("50 images bit-identical: {same}; nonzero power changes output: {moves}"))
}

fn delta_algebra(m: &Random32) -> Outcome {
    let g = &m.g;
    let n = g.num_layers();
    let mut r = rng::derived(8, "delta");
    let wa = WPlusLatent::new(Tensor::randn(&[4, n, g.style_dim()], 1.0, &mut r)).map_err(err)?;
    let wb = WPlusLatent::new(Tensor::randn(&[4, n, g.style_dim()], 1.0, &mut r)).map_err(err)?;
    let k = m.inv.k();
    let d = EditingDirection::new("probe", (0..g.style_dim()).map(|i| (i as f64).sin()).collect(), DirectionSource::Probe)
        .map_err(err)?;
    let zero = compute_delta(g, &wa, &d, 0.0, k).map_err(err)?;
    let zero_ok = zero.values.data().iter().all(|v| *v == 0.0);
    let ab = delta_between(g, &wa, &wb, k).map_err(err)?;
    let ba = delta_between(g, &wb, &wa, k).map_err(err)?;
    let anti = ab.data().iter().zip(ba.data()).all(|(x, y)| x.to_bits() == (-*y).to_bits());
    let s = ab.dim(2);
    let mask_vals: Vec<u8> = (0..s * s).map(|i| u8::from((i * 7919) % 5 < 2)).collect();
    let mask = RegionMask::new(mask_vals.clone(), s).map_err(err)?;
    let dm = DeltaMap { values: ab.clone(), source_layer: k, direction_name: "ab".into(), power: 1.0 };
    let masked = apply_mask(&dm, &mask).map_err(err)?;
    let plane = s * s;
    let support_ok = masked.values.data().chunks(plane).all(|c| c.iter().zip(&mask_vals).all(|(v, &keep)| keep == 1 || *v == 0.0));
    let kept_ok = masked
        .values
        .data()
        .chunks(plane)
        .zip(ab.data().chunks(plane))
        .all(|(c, o)| c.iter().zip(o).zip(&mask_vals).all(|((v, w), &keep)| keep == 0 || v.to_bits() == w.to_bits()));
    ensure(
        zero_ok && anti && support_ok && kept_ok,
        format!("Δ(p=0)≡0: {zero_ok}; Δ(a,b)=−Δ(b,a): {anti}; masked support ⊆ mask: {support_ok}; unmasked kept: {kept_ok}"),
    )
}

// ---------------------------------------------------------------- 4

fn loss_oracle() -> Outcome {
    use rand::Rng;
    let w = LossWeights::default();
    let coeffs = (w.lpips, w.id, w.adv, w.reg);
    if coeffs != (0.8, 0.1, 0.01, 0.01) {
        return Err(format!("default weights are {coeffs:?}"));
    }
    let mut r = rng::derived(9, "loss-oracle");
    let mut worst: f64 = 0.0;
    let mut edit_adv_free = true;
    for _ in 0..20 {
        let mut t = |adv: bool| ImageTerms {
            l2: r.gen_range(0.0..2.0),
            lpips: r.gen_range(0.0..2.0),
            id: r.gen_range(0.0..2.0),
            adv: adv.then(|| r.gen_range(0.0..5.0)),
        };
        let (fused, w_only, edit, inv) = (t(true), t(true), t(true), t(true));
        let reg: f64 = r.gen_range(0.0..10.0);
        // Hand arithmetic, term by term.
        let one = |x: &ImageTerms<f64>| x.l2 + 0.8 * x.lpips + 0.1 * x.id + 0.01 * x.adv.unwrap_or(0.0);
        let p1 = one(&fused) + one(&w_only) + 0.01 * reg;
        let edit_no_adv = edit.l2 + 0.8 * edit.lpips + 0.1 * edit.id;
        let p2 = edit_no_adv + one(&inv);
        let p2_no_inv = edit_no_adv;
        let got1 = compose_phase1(fused, w_only, reg, &w).total;
        let got2 = compose_phase2(edit, Some(inv), &w).total;
        let got3 = compose_phase2(edit, None, &w).total;
        for (a, b) in [(got1, p1), (got2, p2), (got3, p2_no_inv)] {
            worst = worst.max(gradcheck::rel_err(a, b));
        }
        // A huge adversarial value on the edit branch must not move L_edit.
        let loud = ImageTerms { adv: Some(1e9), ..edit };
        edit_adv_free &= compose_phase2(loud, None, &w).total == got3;
    }
    ensure(
        worst <= LOSS_REL_TOL && edit_adv_free,
        format!("worst relative error {worst:e} over 20 draws (tol {LOSS_REL_TOL:e}); edit branch ignores adv: {edit_adv_free}"),
    )
}

// ---------------------------------------------------------------- 5

fn gradient_checks() -> Outcome {
    let mut r = rng::derived(10, "grads");
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, res: gradcheck::GradCheck| {
        let pass = res.passes(GRAD_REL_TOL) && res.probes.len() >= GRAD_PROBES;
        ok &= pass;
        lines.push(format!("{name} {:.1e}{}", res.max_rel_err(), if pass { "" } else { "!" }));
    };
    let h = 1e-5;

    // Modulated convolution, with and without demodulation.
    for demod in [true, false] {
        let x = Tensor::<f64>::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let s = Tensor::randn(&[2, 3], 1.0, &mut r).map(|v: f64| v + 1.0);
        let wt = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
        let res = gradcheck::check(&[x, s, wt], GRAD_PROBES, 1, h, |_, v| {
            Generator::modulated_conv(v[0], v[1], v[2], demod).square().mean()
        });
        record(if demod { "modconv" } else { "modconv(no demod)" }, res);
    }

    let gcfg = GeneratorConfig { style_dim: 8, base_channels: 8, image_resolution: 32, mapping_layers: 1, ..Default::default() };
    let icfg = InverterConfig {
        backbone_stage_channels: [4, 6, 6, 8],
        backbone_strides: [2, 1, 1, 2],
        blocks_per_stage: 1,
        predictor_blocks: 1,
        fuser_blocks: 2,
        w_head_hidden: 8,
        ..Default::default()
    };
    let mut inv = Inverter::<f64>::new(icfg, &gcfg, true).map_err(err)?;
    perturb(&mut inv.params, 0.05, 11);
    let c = gcfg.layer_channels(inv.k());
    let s = sfe_core::stylegen::layer_resolution(inv.k());
    let pair = [Tensor::randn(&[2, c, s, s], 1.0, &mut r), Tensor::randn(&[2, c, s, s], 1.0, &mut r)];
    record(
        "fuser",
        gradcheck::check_with_params(&pair, &inv.params, GRAD_PROBES, 2, h, |p, v| inv.fuse(p, v[0], v[1]).square().mean()),
    );

    // H with Δ taken one layer deeper (twice the resolution), so the reducer is in the path.
    let src = inv.k() + 1;
    let fcfg = FeatureEditorConfig { blocks: 2, hidden_channels: Some(6), source_layer: Some(src), init_seed: 3 };
    let mut fe = FeatureEditor::<f64>::new(fcfg, &gcfg, inv.k()).map_err(err)?;
    perturb(&mut fe.params, 0.05, 12);
    let ss = sfe_core::stylegen::layer_resolution(src);
    let f = Tensor::randn(&[2, c, s, s], 1.0, &mut r);
    let d = Tensor::randn(&[2, gcfg.layer_channels(src), ss, ss], 1.0, &mut r);
    record(
        "H block",
        gradcheck::check_with_params(&[f.clone(), d.clone()], &fe.params, GRAD_PROBES, 3, h, |p, v| {
            fe.forward(p, v[0], v[1]).square().mean()
        }),
    );
    record(
        "Δ reducer",
        gradcheck::check_with_params(&[d], &fe.params, GRAD_PROBES, 4, h, |p, v| fe.reduce_var(p, v[0]).square().mean()),
    );

    // Losses.
    let mut cls = Classifier::<f64>::new(ClassifierConfig { channels: [4, 4, 6, 6], embed_dim: 6, ..Default::default() })
        .map_err(err)?;
    perturb(&mut cls.params, 0.05, 13);
    let img = |r: &mut rand_chacha::ChaCha8Rng| Tensor::<f64>::uniform(&[2, 3, 32, 32], -1.0, 1.0, r);
    let (target, recon) = (img(&mut r), img(&mut r));
    let weights = LossWeights::default();
    record(
        "l2",
        gradcheck::check(&[target.clone(), recon.clone()], GRAD_PROBES, 5, h, |_, v| l2_var(v[0], v[1])),
    );
    record(
        "perceptual",
        gradcheck::check(&[target.clone(), recon.clone()], GRAD_PROBES, 6, h, |g, v| {
            Critic::new(g, &cls).perceptual_pairs(v[0], v[1]).sum()
        }),
    );
    record(
        "identity",
        gradcheck::check(&[target.clone(), recon.clone()], GRAD_PROBES, 7, h, |g, v| {
            Critic::new(g, &cls).identity_pairs(v[0], v[1]).sum()
        }),
    );
    let scores = [Tensor::<f64>::randn(&[4], 1.5, &mut r), Tensor::randn(&[4], 1.5, &mut r)];
    record("adversarial G", gradcheck::check(&scores[..1], GRAD_PROBES, 8, h, |_, v| adversarial_g_var(v[0])));
    record("adversarial D", gradcheck::check(&scores, GRAD_PROBES, 9, h, |_, v| adversarial_d_var(v[0], v[1])));
    let fk = Tensor::<f64>::randn(&[2, 4, 8, 8], 1.0, &mut r);
    record("L_reg", gradcheck::check(&[fk], GRAD_PROBES, 10, h, |_, v| reg_norm_var(v[0])));
    let offs = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut r);
    record("offset penalty", gradcheck::check(&[offs], GRAD_PROBES, 11, h, |_, v| offset_penalty(v[0])));
    record(
        "phase-1 image loss",
        gradcheck::check(&[recon.clone()], GRAD_PROBES, 12, h, |g, v| {
            let c = Critic::new(g, &cls);
            let t = c.target(g.constant(target.clone()));
            let fused = c.terms(&t, v[0], Some(v[0].mean().reshape(&[1])));
            let w_only = c.terms(&t, v[0].scale(0.5), None);
            compose_phase1(fused, w_only, reg_norm_var(v[0]), &weights).total
        }),
    );
    record(
        "phase-2 loss",
        gradcheck::check(&[recon], GRAD_PROBES, 13, h, |g, v| {
            let c = Critic::new(g, &cls);
            let t = c.target(g.constant(target.clone()));
            let edit = c.terms(&t, v[0], None);
            let inv = c.terms(&t, v[0].scale(0.7), Some(v[0].mean().reshape(&[1])));
            compose_phase2(edit, Some(inv), &weights).total
        }),
    );
    ensure(ok, format!("{} checks at {GRAD_PROBES} probes, tol {GRAD_REL_TOL:e}: {}", lines.len(), lines.join(", ")))
}

// ---------------------------------------------------------------- 6

fn frechet_suite() -> Outcome {
    let mut r = rng::derived(14, "frechet");
    let feats = Tensor::<f64>::randn(&[300, 6], 1.0, &mut r);
    let st = GaussianStats::from_features(&feats).map_err(err)?;
    let same = frechet_between(&st, &st).map_err(err)?;
    let one = frechet_distance(
        &DVector::from_element(1, 0.0),
        &DMatrix::from_element(1, 1, 1.0),
        &DVector::from_element(1, 1.0),
        &DMatrix::from_element(1, 1, 1.0),
    )
    .map_err(err)?;
    let m1 = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
    let m2 = DVector::from_vec(vec![-0.2, 0.5, 2.5, 1.0]);
    let v1 = [0.5, 2.0, 1.0, 3.0];
    let v2 = [1.5, 0.25, 1.0, 0.1];
    let diag = frechet_distance(
        &m1,
        &DMatrix::from_diagonal(&DVector::from_row_slice(&v1)),
        &m2,
        &DMatrix::from_diagonal(&DVector::from_row_slice(&v2)),
    )
    .map_err(err)?;
    let closed: f64 = (&m1 - &m2).norm_squared() + v1.iter().zip(&v2).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum::<f64>();
    ensure(
        same.abs() <= FRECHET_SAME_TOL && (one - 1.0).abs() <= FRECHET_CLOSED_TOL && (diag - closed).abs() <= FRECHET_CLOSED_TOL,
        format!("identical {same:e}; 1-D {one:.12}; diagonal {diag:.12} vs {closed:.12}"),
    )
}

// ---------------------------------------------------------------- tiny run (7, 11)

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.train_size = 48;
    c.data.test_size = 32;
    c.generator = GeneratorConfig { style_dim: 8, base_channels: 8, image_resolution: 32, mapping_layers: 1, ..Default::default() };
    let p = &mut c.generator.pretrain;
    (p.steps, p.batch_size, p.w_avg_samples, p.fid_threshold, p.fid_samples, p.checkpoint_every) = (2, 4, 200, 1e12, 16, 0);
    c.classifier = ClassifierConfig { channels: [4, 4, 4, 4], embed_dim: 8, steps: 2, batch_size: 4, ..Default::default() };
    c.encoder_e = BaseEncoderConfig { base_channels: 4, hidden: 16, steps: 2, batch_size: 2, checkpoint_every: 0, ..Default::default() };
    c.inverter = InverterConfig {
        backbone_stage_channels: [4, 6, 6, 8],
        backbone_strides: [2, 1, 1, 2],
        blocks_per_stage: 1,
        predictor_blocks: 1,
        fuser_blocks: 1,
        w_head_hidden: 8,
        ..Default::default()
    };
    c.feature_editor = FeatureEditorConfig { blocks: 1, hidden_channels: Some(6), ..Default::default() };
    c.train.batch_size = 2;
    c.train.phase1_steps = 4;
    c.train.phase2_steps = 4;
    c.train.adv_start_step = 2;
    c.train.checkpoint_every = 2;
    c.train.log_every = 1;
    c.eval.n_test = 32;
    c.eval.batch = 16;
    c.eval.directions = vec!["glasses+".into(), "pose+".into()];
    c
}

fn tiny_registry(cfg: &RunConfig) -> Result<DirectionRegistry, String> {
    let d = cfg.generator.style_dim;
    let mut r = rng::derived(15, "tiny-registry");
    let mut directions = Vec::new();
    for attr in ATTRIBUTE_NAMES {
        let v = Tensor::<f64>::randn(&[d], 1.0, &mut r).data().to_vec();
        let mut plus = EditingDirection::new(format!("{attr}+"), v, DirectionSource::Probe).map_err(err)?;
        plus.attribute = Some((attr.to_string(), true));
        plus.default_powers = vec![0.5, 1.0, 1.5];
        directions.push(plus.negated(format!("{attr}-")));
        directions.push(plus);
    }
    for i in 1..=2 {
        let v = Tensor::<f64>::randn(&[d], 1.0, &mut r).data().to_vec();
        let mut pc = EditingDirection::new(format!("pca-{i}"), v, DirectionSource::Pca).map_err(err)?;
        pc.default_powers = vec![0.5, 1.0, 1.5];
        directions.push(pc);
    }
    let dc = &cfg.directions;
    Ok(DirectionRegistry {
        schema_version: SCHEMA_VERSION,
        style_dim: d,
        num_layers: cfg.generator.num_layers(),
        w_mean: vec![0.0; d],
        directions,
        train: dc.train.clone(),
        small: dc.small.clone(),
        holdout: dc.holdout.clone(),
        probe_accuracy: BTreeMap::new(),
    })
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let dst = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &dst)?;
        } else {
            std::fs::copy(e.path(), dst)?;
        }
    }
    Ok(())
}

struct TinyRuns {
    _tmp: tempfile::TempDir,
    straight: Run,
    resumed: Run,
    freeze: Vec<(String, bool)>,
}

/// Two copies of one tiny upstream; phases 1 and 2 run straight through
/// in one and with a stop-and-resume from disk in the other.
fn tiny_runs() -> Result<TinyRuns, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = tiny_config();
    let a = Run::new(tmp.path().join("a"), cfg.clone()).map_err(err)?;
    a.data_build(0).map_err(err)?;
    a.classifier_train::<f64>(0, None).map_err(err)?;
    a.gan_train::<f64>(0, None).map_err(err)?;
    a.encoder_e_train::<f64>(0, None).map_err(err)?;
    let reg = tiny_registry(&cfg)?;
    std::fs::create_dir_all(a.registry_path().parent().unwrap()).map_err(err)?;
    reg.save(&a.registry_path()).map_err(err)?;
    copy_dir(&a.root, &tmp.path().join("b")).map_err(err)?;
    let b = Run::new(tmp.path().join("b"), cfg).map_err(err)?;

    let mut freeze = Vec::new();
    let r = a.phase1_train::<f64>(Variant::Full, 0, None).map_err(err)?;
    freeze.push(("phase1: generator".to_string(), r.holds() && r.before.contains_key("generator")));
    let r = a.phase2_train::<f64>(Variant::Full, 0, None).map_err(err)?;
    for c in ["generator", "encoder_e", "inverter"] {
        freeze.push((format!("phase2: {c}"), r.before.get(c).is_some() && r.before.get(c) == r.after.get(c)));
    }
    b.phase1_train::<f64>(Variant::Full, 0, Some(1)).map_err(err)?;
    // Stopped early above; this call resumes from the saved bundle.
    b.phase1_train::<f64>(Variant::Full, 0, None).map_err(err)?;
    b.phase2_train::<f64>(Variant::Full, 0, Some(3)).map_err(err)?;
    b.phase2_train::<f64>(Variant::Full, 0, None).map_err(err)?;
    Ok(TinyRuns { _tmp: tmp, straight: a, resumed: b, freeze })
}

// ---------------------------------------------------------------- full run (7-10)

struct FullRun {
    run: Run,
    reports: BTreeMap<String, EvalReport>,
    registry: DirectionRegistry,
    freeze: Vec<(String, bool)>,
    notes: Vec<String>,
}

fn freeze_file(run: &Run) -> PathBuf {
    run.root.join("freeze.json")
}

fn full_run() -> Result<FullRun, String> {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run");
    if std::env::var("SFE_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") && root.exists() {
        std::fs::remove_dir_all(&root).map_err(err)?;
    }
    let cfg = acceptance_config();
    let seed = cfg.train.seed;
    let run = Run::new(&root, cfg.clone()).map_err(err)?;
    let stage = |name: &str| eprintln!("[acceptance] {name}");
    let mut notes = Vec::new();
    if !run.data_dir().join("train.jsonl").exists() {
        run.data_build(cfg.data.seed).map_err(err)?;
    }
    stage("classifier");
    run.classifier_train::<f32>(seed, None).map_err(err)?;
    stage("gan");
    match run.gan_train::<f32>(seed, None) {
        Ok(s) => notes.push(format!("generator toy-FID {:.2}", s.toy_fid)),
        Err(CoreError::QualityGate(m)) => notes.push(m),
        Err(e) => return Err(e.to_string()),
    }
    stage("encoder_e");
    run.encoder_e_train::<f32>(seed, None).map_err(err)?;
    if !run.registry_path().exists() {
        stage("directions");
        run.directions_fit::<f32>(seed).map_err(err)?;
    }
    let mut freeze: BTreeMap<String, bool> = std::fs::read_to_string(freeze_file(&run))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    let mut note_freeze = |label: &str, r: sfe_core::trainer::FreezeReport, trained: bool| {
        if trained {
            for (c, before) in &r.before {
                freeze.insert(format!("{label}: {c}"), r.after.get(c) == Some(before));
            }
        }
    };
    let trained = |comp: &str, until: usize| -> Result<bool, String> {
        Ok(sfe_core::checkpoint::latest(&run.root, comp).map_err(err)?.map_or(0, |b| b.step()) < until)
    };
    stage("phase1");
    let t = trained("phase1", cfg.train.phase1_steps)?;
    let r = run.phase1_train::<f32>(Variant::Full, seed, None).map_err(err)?;
    note_freeze("full phase1", r, t);
    for v in [Variant::Full, Variant::Ablated(Ablation::NoInvLoss), Variant::Ablated(Ablation::DSmall)] {
        stage(&format!("phase2 {}", v.label()));
        let t = trained(&v.phase2_component().unwrap(), cfg.train.phase2_steps)?;
        let r = run.phase2_train::<f32>(v, seed, None).map_err(err)?;
        note_freeze(&format!("{} phase2", v.label()), r, t);
    }
    std::fs::write(freeze_file(&run), serde_json::to_string_pretty(&freeze).map_err(err)?).map_err(err)?;

    let mut reports = BTreeMap::new();
    let evals = [
        ("full", Variant::Full, false),
        ("encoder_e", Variant::Full, true),
        ("no_H", Variant::Ablated(Ablation::NoH), false),
        ("no_inv_loss", Variant::Ablated(Ablation::NoInvLoss), false),
        ("D_small", Variant::Ablated(Ablation::DSmall), false),
    ];
    for (label, v, baseline) in evals {
        let dir = run.root.join("reports").join(label);
        let ids = run.load::<f32>(v).map_err(err)?.checkpoints;
        let cached = EvalReport::read(&dir).ok().filter(|r| r.provenance.checkpoints == ids);
        let report = match cached {
            Some(r) => r,
            None => {
                stage(&format!("eval {label}"));
                let r = run.evaluate::<f32>(v, baseline, cfg.eval.seed, false).map_err(err)?;
                r.write(&dir).map_err(err)?;
                r
            }
        };
        reports.insert(label.to_string(), report);
    }
    let grid = run.root.join("reports").join("grid.png");
    if !grid.exists() {
        run.grid::<f32>(Variant::Full, &grid).map_err(err)?;
    }
    let registry = run.load_registry().map_err(err)?;
    Ok(FullRun { run, reports, registry, freeze: freeze.into_iter().collect(), notes })
}

fn freeze_contracts(tiny: &Result<TinyRuns, String>, full: &Result<FullRun, String>) -> Outcome {
    let mut all = Vec::new();
    match tiny {
        Ok(t) => all.extend(t.freeze.iter().map(|(k, v)| (format!("tiny {k}"), *v))),
        Err(e) => return Err(format!("tiny run failed: {e}")),
    }
    match full {
        Ok(f) => all.extend(f.freeze.iter().cloned()),
        Err(e) => return Err(format!("full run failed: {e}")),
    }
    let needed = ["tiny phase1: generator", "tiny phase2: generator", "tiny phase2: encoder_e", "tiny phase2: inverter"];
    let present = needed.iter().all(|n| all.iter().any(|(k, _)| k == n));
    let broken: Vec<&str> = all.iter().filter(|(_, ok)| !ok).map(|(k, _)| k.as_str()).collect();
    ensure(
        present && broken.is_empty(),
        format!("{} checksum comparisons, broken: {:?}", all.len(), broken),
    )
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn inversion_ordering(f: &FullRun) -> Outcome {
    let full = &f.reports["full"].inversion;
    let base = &f.reports["encoder_e"].inversion;
    ensure(
        full.l2 <= L2_RATIO * base.l2 && full.perceptual < base.perceptual,
        format!(
            "L2 {:.5} vs E-only {:.5} (ratio {:.3}, need <= {L2_RATIO}); perceptual {:.5} vs {:.5}",
            full.l2,
            base.l2,
            full.l2 / base.l2,
            full.perceptual,
            base.perceptual
        ),
    )
}

/// Trained directions that carry an attribute, as evaluated.
fn trained_attr_dirs<'a>(f: &'a FullRun, label: &str) -> Vec<(&'a String, &'a sfe_core::evalsuite::EditingMetrics)> {
    f.reports[label].editing.iter().filter(|(n, _)| f.registry.train.contains(n)).collect()
}

fn mean_editing_fid(f: &FullRun, label: &str) -> f64 {
    mean(trained_attr_dirs(f, label).iter().map(|(_, m)| m.editing_fid))
}

fn editing_efficacy(f: &FullRun) -> Outcome {
    let dirs = trained_attr_dirs(f, "full");
    let good: Vec<&str> =
        dirs.iter().filter(|(_, m)| m.flip_rate >= MIN_FLIP && m.id_similarity >= MIN_ID).map(|(n, _)| n.as_str()).collect();
    let table: Vec<String> =
        dirs.iter().map(|(n, m)| format!("{n} flip {:.2} id {:.2} fid {:.2}", m.flip_rate, m.id_similarity, m.editing_fid)).collect();
    let (fid_full, fid_noh) = (mean_editing_fid(f, "full"), mean_editing_fid(f, "no_H"));
    eprintln!("[acceptance] editing (full): {}", table.join("; "));
    ensure(
        good.len() >= MIN_GOOD_DIRECTIONS && fid_full <= fid_noh,
        format!(
            "{} trained directions with flip >= {MIN_FLIP} and id >= {MIN_ID}: {:?}; mean editing-FID(A,B') {fid_full:.3} vs no_H {fid_noh:.3}",
            good.len(),
            good
        ),
    )
}

fn ablation_orderings(f: &FullRun) -> Outcome {
    let inv = |l: &str| &f.reports[l].inversion;
    let (full, noh, noinv) = (inv("full"), inv("no_H"), inv("no_inv_loss"));
    let noh_inv_better = noh.l2 < full.l2 && noh.perceptual < full.perceptual;
    let noh_edit_worse = mean_editing_fid(f, "no_H") > mean_editing_fid(f, "full");
    let noinv_worse = noinv.l2 > full.l2 && noinv.perceptual > full.perceptual;
    let mut drops = Vec::new();
    for h in &f.registry.holdout {
        let a = f.reports["full"].editing.get(h).map(|m| m.flip_rate);
        let b = f.reports["D_small"].editing.get(h).map(|m| m.flip_rate);
        match (a, b) {
            (Some(a), Some(b)) => drops.push((h.clone(), a - b)),
            _ => return Err(format!("holdout direction {h} was not evaluated")),
        }
    }
    let dsmall_ok = !drops.is_empty() && drops.iter().all(|(_, d)| *d <= HOLDOUT_FLIP_DROP);
    ensure(
        noh_inv_better && noh_edit_worse && noinv_worse && dsmall_ok,
        format!(
            "no_H inversion better: {noh_inv_better} (L2 {:.5} vs {:.5}, perc {:.5} vs {:.5}); no_H editing worse: {noh_edit_worse} \
             (FID {:.3} vs {:.3}); no_inv_loss inversion worse: {noinv_worse} (L2 {:.5}, perc {:.5}); \
             D_small holdout flip drop {:?} (max {HOLDOUT_FLIP_DROP})",
            noh.l2,
            full.l2,
            noh.perceptual,
            full.perceptual,
            mean_editing_fid(f, "no_H"),
            mean_editing_fid(f, "full"),
            noinv.l2,
            noinv.perceptual,
            drops.iter().map(|(n, d)| format!("{n} {d:+.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 11

fn determinism(tiny: &Result<TinyRuns, String>) -> Outcome {
    let t = tiny.as_ref().map_err(|e| format!("tiny run failed: {e}"))?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut bytes = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("eval{i}"));
        t.straight.evaluate::<f64>(Variant::Full, false, 3, false).map_err(err)?.write(&dir).map_err(err)?;
        let read = |n: &str| std::fs::read(dir.join(n)).map_err(err);
        bytes.push((read("report.json")?, read("report.csv")?));
    }
    let eval_same = bytes[0] == bytes[1];
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for phase in ["phase1", "phase2"] {
        let a = read_log(&t.straight.log_path(phase)).map_err(err)?;
        let b = read_log(&t.resumed.log_path(phase)).map_err(err)?;
        if a.len() != b.len() || a.is_empty() {
            return Err(format!("{phase}: {} straight records vs {} resumed", a.len(), b.len()));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.step != y.step || x.values.keys().ne(y.values.keys()) {
                return Err(format!("{phase}: records diverge at step {} / {}", x.step, y.step));
            }
            for (k, v) in &x.values {
                worst = worst.max(gradcheck::rel_err(*v, y.values[k]));
                compared += 1;
            }
        }
    }
    ensure(
        eval_same && worst <= RESUME_REL_TOL,
        format!("eval reports byte-identical: {eval_same}; resumed logs worst rel diff {worst:e} over {compared} values (tol {RESUME_REL_TOL:e})"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "splice identity", splice_identity()));
    let random = random_pipeline();
    match &random {
        Ok(m) => {
            results.push((2, "zero-edit identity", zero_edit_identity(m)));
            results.push((3, "Δ algebra", delta_algebra(m)));
        }
        Err(e) => {
            results.push((2, "zero-edit identity", Err(e.clone())));
            results.push((3, "Δ algebra", Err(e.clone())));
        }
    }
    results.push((4, "loss arithmetic oracle", loss_oracle()));
    results.push((5, "gradient checks", gradient_checks()));
    results.push((6, "Fréchet unit suite", frechet_suite()));
    let tiny = tiny_runs();
    let full = full_run();
    results.push((7, "freeze contracts", freeze_contracts(&tiny, &full)));
    match &full {
        Ok(f) => {
            results.push((8, "inversion ordering vs E-only", inversion_ordering(f)));
            results.push((9, "editing efficacy", editing_efficacy(f)));
            results.push((10, "ablation orderings", ablation_orderings(f)));
            for n in &f.notes {
                eprintln!("[acceptance] note: {n}");
            }
            eprintln!("[acceptance] full-run artifacts in {}", f.run.root.display());
        }
        Err(e) => {
            for (i, name) in [(8, "inversion ordering vs E-only"), (9, "editing efficacy"), (10, "ablation orderings")] {
                results.push((i, name, Err(format!("full run failed: {e}"))));
            }
        }
    }
    results.push((11, "determinism", determinism(&tiny)));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (i, name, r) in &results {
        match r {
            Ok(d) => println!("PASS [{i}] {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{i}] {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("SFE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
