use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
train_size = 48
test_size = 16

[generator]
style_dim = 8
base_channels = 8
image_resolution = 32
mapping_layers = 1

[generator.pretrain]
steps = 2
batch_size = 4
w_avg_samples = 200
fid_threshold = 1e12
fid_samples = 16
checkpoint_every = 0

[classifier]
channels = [4, 4, 4, 4]
embed_dim = 8
steps = 2
batch_size = 4

[encoder_e]
base_channels = 4
hidden = 16
steps = 2
batch_size = 2
checkpoint_every = 0

[inverter]
backbone_stage_channels = [4, 6, 6, 8]
backbone_strides = [2, 1, 1, 2]
blocks_per_stage = 1
predictor_blocks = 1
fuser_blocks = 1
w_head_hidden = 8

[feature_editor]
blocks = 1
hidden_channels = 6

[directions]
n_samples = 200
pca_samples = 200
w_mean_samples = 200
calibration_images = 4
power_grid = [1.0, 2.0]

[train]
batch_size = 2
phase1_steps = 2
phase2_steps = 2
adv_start_step = 1
checkpoint_every = 0
log_every = 1

[eval]
n_test = 16
batch = 8
directions = ["glasses+", "pose+"]
power_sweep = false
grid_images = 2
"#;

fn sfe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfe"))
        .current_dir(dir)
        .args(["--config", "tiny.toml", "--checkpoint", "run", "--out", "out"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = sfe(dir, args);
    assert!(o.status.success(), "sfe {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn tiny_dir() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("tiny.toml"), TINY).unwrap();
    t
}

#[test]
fn bad_arguments_exit_1() {
    let t = tiny_dir();
    assert_eq!(sfe(t.path(), &["frobnicate"]).status.code(), Some(1));
    std::fs::write(t.path().join("bad.toml"), "[train]\nphase9_steps = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sfe"))
        .current_dir(t.path())
        .args(["--config", "bad.toml", "data", "build"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(sfe(t.path(), &["ablate", "no_such_ablation"]).status.code(), Some(1));
}

#[test]
fn phase2_without_phase1_exits_1() {
    let t = tiny_dir();
    ok(t.path(), &["data", "build"]);
    let o = sfe(t.path(), &["phase2", "train"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let t = tiny_dir();
    let d = t.path();
    for cmd in [
        &["data", "build"][..],
        &["classifier", "train"],
        &["gan", "train"],
        &["encoder-e", "train"],
        &["directions", "fit"],
        &["phase1", "train"],
        &["phase2", "train"],
    ] {
        ok(d, cmd);
    }

    let o = sfe(d, &["edit", "--direction", "no_such_direction", "--power", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_direction"));

    ok(d, &["invert"]);
    ok(d, &["edit", "--direction", "glasses+", "--power", "-1.5"]);
    assert!(d.join("out/test000_inv.png").exists());
    assert!(d.join("out/test001_glasses+_-1.5.png").exists());

    ok(d, &["eval", "full"]);
    let first = std::fs::read(d.join("out/report.json")).unwrap();
    ok(d, &["eval", "full"]);
    assert_eq!(first, std::fs::read(d.join("out/report.json")).unwrap(), "eval is not deterministic");

    ok(d, &["report", "grid"]);
    assert!(d.join("out/grid.png").exists());
}

#[test]
fn longer_schedule_resumes_but_changed_hyperparameters_do_not() {
    let t = tiny_dir();
    let d = t.path();
    for cmd in [&["data", "build"][..], &["classifier", "train"], &["gan", "train"], &["encoder-e", "train"], &["phase1", "train"]] {
        ok(d, cmd);
    }
    let with = |name: &str, from: &str, to: &str| {
        assert!(TINY.contains(from));
        std::fs::write(d.join(name), TINY.replace(from, to)).unwrap();
    };
    with("longer.toml", "phase1_steps = 2", "phase1_steps = 3");
    let o = Command::new(env!("CARGO_BIN_EXE_sfe"))
        .current_dir(d)
        .args(["--config", "longer.toml", "--checkpoint", "run", "phase1", "train"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("run/phase1/00000003").is_dir());

    with("other_lr.toml", "batch_size = 2\nphase1_steps = 2", "batch_size = 2\nlr_main = 0.123\nphase1_steps = 4");
    let o = Command::new(env!("CARGO_BIN_EXE_sfe"))
        .current_dir(d)
        .args(["--config", "other_lr.toml", "--checkpoint", "run", "phase1", "train"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}
