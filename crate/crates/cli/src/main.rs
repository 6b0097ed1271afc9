//! `sfe`: data, training, editing and evaluation from one binary.
//!
//! Exit status is 0 on success, 1 when the input is invalid (bad config,
//! unknown names, missing prerequisite checkpoints) and 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sfe_core::config::{Ablation, RunConfig};
use sfe_core::feature_editor::{EditRequest, RegionMask};
use sfe_core::imageio::{load_png, save_png};
use sfe_core::stylegen::layer_resolution;
use sfe_core::toyworld::Split;
use sfe_core::workflow::{Run, Variant};
use sfe_core::{CoreError, Real};
use sfe_tensor::Tensor;

#[derive(Parser)]
#[command(name = "sfe", version, about = "Feature-space inversion and editing on a toy image domain")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for everything stochastic in this command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports and images.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run directory holding data, checkpoints and logs.
    #[arg(long, global = true, default_value = "run")]
    checkpoint: PathBuf,
    /// Override the number of training steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset manifests.
    Data {
        #[command(subcommand)]
        action: Build,
    },
    /// Attribute classifier (feature network for the perceptual, identity and FID proxies).
    Classifier {
        #[command(subcommand)]
        action: Train,
    },
    /// Generator pretraining.
    Gan {
        #[command(subcommand)]
        action: Train,
    },
    /// Base encoder into W+.
    #[command(name = "encoder-e")]
    EncoderE {
        #[command(subcommand)]
        action: Train,
    },
    /// Inverter training.
    Phase1 {
        #[command(subcommand)]
        action: Train,
    },
    /// Feature editor training.
    Phase2 {
        #[command(subcommand)]
        action: Train,
    },
    /// Editing directions.
    Directions {
        #[command(subcommand)]
        action: Fit,
    },
    /// Reconstruct images through the full pipeline.
    Invert(Inputs),
    /// Edit images along a named direction.
    Edit {
        #[arg(long)]
        direction: String,
        #[arg(long, allow_hyphen_values = true)]
        power: f64,
        /// Binary PNG restricting the edit to white regions.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Evaluation.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
    /// Train (as needed) and evaluate one ablation.
    Ablate { name: String },
    /// Figures.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
}

#[derive(Subcommand)]
enum Build {
    Build,
}

#[derive(Subcommand)]
enum Train {
    Train,
}

#[derive(Subcommand)]
enum Fit {
    Fit,
}

#[derive(Subcommand)]
enum EvalAction {
    Full {
        /// Also evaluate the base-encoder-only baseline.
        #[arg(long)]
        baseline: bool,
        /// Measure per-image latency (written to timing.json).
        #[arg(long)]
        timing: bool,
    },
}

#[derive(Subcommand)]
enum ReportAction {
    Grid,
}

#[derive(Args)]
struct Inputs {
    /// PNG images; the first test images are used when none are given.
    inputs: Vec<PathBuf>,
}

fn print_json<S: Serialize>(v: &S) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_inputs(run: &Run, inputs: &[PathBuf]) -> anyhow::Result<(Tensor<Real>, Vec<String>)> {
    if inputs.is_empty() {
        let test = run.dataset::<Real>(Split::Test)?;
        let n = run.config.eval.grid_images.min(test.len());
        let names = (0..n).map(|i| format!("test{i:03}")).collect();
        return Ok((test.images.slice_batch(0, n), names));
    }
    let mut imgs = Vec::new();
    let mut names = Vec::new();
    for p in inputs {
        imgs.push(load_png::<Real>(p)?);
        names.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
    }
    Ok((Tensor::stack(&imgs).map_err(CoreError::from)?, names))
}

fn save_all(out: &Path, imgs: &Tensor<Real>, names: &[String], suffix: &str) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let p = out.join(format!("{n}_{suffix}.png"));
        save_png(&imgs.index_batch(i), &p)?;
        written.push(p);
    }
    Ok(written)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let run = Run::new(&g.checkpoint, config)?;
    let train_seed = g.seed.unwrap_or(run.config.train.seed);
    let eval_seed = g.seed.unwrap_or(run.config.eval.seed);
    match cli.command {
        Command::Data { action: Build::Build } => print_json(&run.data_build(g.seed.unwrap_or(run.config.data.seed))?),
        Command::Classifier { action: Train::Train } => print_json(&run.classifier_train::<Real>(train_seed, g.steps)?),
        Command::Gan { action: Train::Train } => print_json(&run.gan_train::<Real>(train_seed, g.steps)?),
        Command::EncoderE { action: Train::Train } => {
            let steps = run.encoder_e_train::<Real>(train_seed, g.steps)?;
            print_json(&serde_json::json!({ "steps": steps }))
        }
        Command::Phase1 { action: Train::Train } => {
            let r = run.phase1_train::<Real>(Variant::Full, train_seed, g.steps)?;
            print_json(&serde_json::json!({ "frozen": r.after }))
        }
        Command::Phase2 { action: Train::Train } => {
            let r = run.phase2_train::<Real>(Variant::Full, train_seed, g.steps)?;
            print_json(&serde_json::json!({ "frozen": r.after }))
        }
        Command::Directions { action: Fit::Fit } => {
            let (reg, report) = run.directions_fit::<Real>(train_seed)?;
            for (attr, acc) in &reg.probe_accuracy {
                if *acc < run.config.directions.min_probe_accuracy {
                    eprintln!("warning: probe for `{attr}` reaches only {acc:.3} held-out accuracy");
                }
            }
            print_json(&serde_json::json!({ "directions": reg.names().collect::<Vec<_>>(), "probe_accuracy": reg.probe_accuracy, "report": report }))
        }
        Command::Invert(inp) => {
            let m = run.load::<Real>(Variant::Full)?;
            let (x, names) = load_inputs(&run, &inp.inputs)?;
            let y = m.pipeline().invert_image(&x)?;
            print_json(&save_all(&g.out, &y, &names, "inv")?)
        }
        Command::Edit { direction, power, mask, inputs } => {
            if !power.is_finite() {
                bail!(CoreError::Invalid(format!("power must be finite, got {power}")));
            }
            // Resolve the name before loading any weights.
            let reg = run.load_registry()?;
            reg.get(&direction)?;
            let m = run.load::<Real>(Variant::Full)?;
            let d = m.registry.get(&direction)?;
            let mask = mask.map(|p| RegionMask::from_image(&p, layer_resolution(m.inverter.k()))).transpose()?;
            let (x, names) = load_inputs(&run, &inputs.inputs)?;
            let y = m.pipeline().edit_image(&x, EditRequest { direction: d, power, mask: mask.as_ref() })?;
            print_json(&save_all(&g.out, &y, &names, &format!("{direction}_{power}"))?)
        }
        Command::Eval { action: EvalAction::Full { baseline, timing } } => {
            let report = run.evaluate::<Real>(Variant::Full, false, eval_seed, timing)?;
            report.write(&g.out)?;
            if baseline {
                run.evaluate::<Real>(Variant::Full, true, eval_seed, false)?.write(&g.out.join("baseline"))?;
            }
            print_json(&report)
        }
        Command::Ablate { name } => {
            let a: Ablation = name.parse()?;
            let v = Variant::Ablated(a);
            if a.retrains_phase1() {
                run.phase1_train::<Real>(v, train_seed, g.steps)?;
            }
            if v.phase2_component().is_some() {
                run.phase2_train::<Real>(v, train_seed, g.steps)?;
            }
            let report = run.evaluate::<Real>(v, false, eval_seed, false)?;
            report.write(&g.out.join("ablations").join(a.name()))?;
            print_json(&report)
        }
        Command::Report { action: ReportAction::Grid } => {
            let p = g.out.join("grid.png");
            run.grid::<Real>(Variant::Full, &p)?;
            print_json(&p)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<CoreError>() {
        Some(c) if c.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
