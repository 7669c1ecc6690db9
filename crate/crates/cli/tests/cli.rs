use std::path::Path;
use std::process::{Command, Output};

use featherpoint::bench::{BORDER_MARGIN, EPS_PX};
use featherpoint::deploy::DEFAULT_BUDGET_BYTES;
use featherpoint::keypoints::{ThresholdMode, FIXED_THRESHOLDS, NMS_RADIUS};
use featherpoint::losses::{FOCAL_ALPHA, FOCAL_BETA, TAU_REL};
use featherpoint::optim::{DEFAULT_CLIP_NORM, DEFAULT_LR, DEFAULT_PLATEAU_FACTOR, DEFAULT_PLATEAU_PATIENCE, DEFAULT_WEIGHT_DECAY};
use featherpoint::Error;
use featherpoint_cli::commands::{METRICS_FILE, MODEL_FILE};
use featherpoint_cli::config::{apply_override, default_lines, resolve, RunConfig};
use featherpoint_cli::{CliError, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INTERNAL};

const TINY: [&str; 8] = [
    "--data.synthetic.n_train",
    "8",
    "--data.synthetic.n_val",
    "2",
    "--data.synthetic.size",
    "32",
    "--eval.pairs",
    "2",
];

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featherpoint"))
        .args(args)
        .args(TINY)
        .args(["--out_dir", out.to_str().unwrap()])
        .output()
        .unwrap()
}

#[test]
fn help_lists_every_default() {
    for args in [vec!["--help"], vec!["train", "--help"], vec!["eval", "-h"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_featherpoint")).args(&args).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for line in default_lines() {
            assert!(text.contains(&line), "{args:?} help lacks `{line}`");
        }
    }
}

#[test]
fn defaults_come_from_the_library_constants() {
    let c = RunConfig::default();
    assert_eq!(c.train.lr, DEFAULT_LR);
    assert_eq!(c.train.weight_decay, DEFAULT_WEIGHT_DECAY);
    assert_eq!(c.train.clip, DEFAULT_CLIP_NORM);
    assert_eq!(c.train.plateau.factor, DEFAULT_PLATEAU_FACTOR);
    assert_eq!(c.train.plateau.patience, DEFAULT_PLATEAU_PATIENCE);
    assert_eq!((c.loss.alpha, c.loss.beta, c.loss.tau_rel), (FOCAL_ALPHA, FOCAL_BETA, TAU_REL));
    assert_eq!(c.eval.nms_radius, NMS_RADIUS);
    assert_eq!(c.eval.eps_px, EPS_PX);
    assert_eq!(c.eval.border, BORDER_MARGIN);
    assert_eq!(c.eval.threshold_modes[0], ThresholdMode::Adaptive);
    assert_eq!(c.eval.threshold_modes[1..], FIXED_THRESHOLDS.map(ThresholdMode::Fixed));
    assert_eq!(c.report.budget_bytes, DEFAULT_BUDGET_BYTES);
    assert_eq!(c.model, featherpoint::nn::ArchSpec::default());
    assert_eq!(resolve(None, &[]).unwrap(), c);
}

#[test]
fn overrides_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("c.json");
    std::fs::write(&file, r#"{"train": {"epochs": 7, "batch": 2}, "seed": 4}"#).unwrap();
    let c = resolve(Some(&file), &[("train.epochs".into(), "9".into()), ("out_dir".into(), "runs/a".into())]).unwrap();
    assert_eq!((c.train.epochs, c.train.batch, c.seed), (9, 2, 4));
    assert_eq!(c.out_dir, Path::new("runs/a"));
    assert_eq!(c.train.lr, DEFAULT_LR);

    let mut v = serde_json::json!({"a": {"b": 1}});
    assert!(apply_override(&mut v, "a.c.d", "1").is_err());
    assert!(apply_override(&mut v, "a..b", "1").is_err());

    for (k, v) in [("train.epoch", "3"), ("train.epochs", "\"many\""), ("data.synthetic.size", "30")] {
        let e = resolve(None, &[(k.into(), v.into())]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG, "{k}: {e}");
    }
    let e = resolve(None, &[("train.epoch".into(), "3".into())]).unwrap_err().to_string();
    assert!(e.contains("train.epoch"), "{e}");
}

#[test]
fn zero_epochs_writes_initial_model_and_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--train.epochs", "0"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join(MODEL_FILE).is_file());
    assert_eq!(std::fs::read(tmp.path().join(METRICS_FILE)).unwrap(), b"");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.ends_with(MODEL_FILE)));
}

#[test]
fn same_config_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        assert!(run(&["train", "--train.epochs", "1", "--seed", "5"], d).status.success());
    }
    for f in [MODEL_FILE, METRICS_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(run(&["train", "--train.bogus", "1"], tmp.path())), EXIT_CONFIG);
    assert_eq!(code(run(&["report", "no/such/model.fpt.json"], tmp.path())), EXIT_CONFIG);
    assert_eq!(code(run(&["frobnicate"], tmp.path())), EXIT_CONFIG);
    let garbage = tmp.path().join("bad.fpt.json");
    std::fs::write(&garbage, "{}").unwrap();
    assert_eq!(code(run(&["report", garbage.to_str().unwrap()], tmp.path())), EXIT_CONFIG);
    let diverge = ["train", "--train.epochs", "2", "--train.lr", "1e30", "--train.clip", "1e300"];
    assert_eq!(code(run(&diverge, tmp.path())), EXIT_DIVERGED);

    assert_eq!(CliError::Core(Error::Divergence { epoch: 1 }).exit_code(), EXIT_DIVERGED);
    assert_eq!(CliError::Core(Error::NonFiniteGradient("w".into())).exit_code(), EXIT_DIVERGED);
    assert_eq!(CliError::Core(Error::EmptyCalibrationStream).exit_code(), EXIT_INTERNAL);
    assert_eq!(CliError::Core(Error::UnknownParameter("w".into())).exit_code(), EXIT_INTERNAL);
}

#[test]
fn thread_variable_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_featherpoint"))
        .args(["gen-data", "--gen.sequences", "1", "--gen.height", "32", "--gen.width", "32"])
        .args(["--out_dir", tmp.path().to_str().unwrap()])
        .env("FEATHERPOINT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = Command::new(env!("CARGO_BIN_EXE_featherpoint"))
        .args(["gen-data", "--gen.sequences", "1", "--gen.height", "32", "--gen.width", "32"])
        .args(["--out_dir", tmp.path().to_str().unwrap()])
        .env("FEATHERPOINT_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
}
