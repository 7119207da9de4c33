use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tofalign"))
        .args(args)
        .output()
        .unwrap()
}

fn json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let d = dir.to_str().unwrap();
    let mut args = vec![
        "synth", "--out", d, "--seed", "9", "--width", "48", "--height", "36", "--fx", "40",
        "--fy", "40",
    ];
    args.extend_from_slice(extra);
    json(&args);
    format!("{d}/sample_0000")
}

#[test]
fn synth_then_eval_is_exact_without_multipath() {
    let tmp = tempfile::tempdir().unwrap();
    let sample = synth(tmp.path(), &["--no-mpi"]);
    let report = json(&["eval", "--sample", &sample]);
    for key in [
        "mae_low",
        "mae_mid",
        "mae_high",
        "mae_all",
        "outlier_fraction",
        "data_term",
        "grad_term",
        "total",
        "lambda",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report["mae_all"].as_f64().unwrap() < 1e-6);
    assert!(Path::new(&sample).join("scene.json").is_file());
    assert!(tmp.path().join("split.json").is_file());
}

#[test]
fn augment_then_calib_recovers_the_perturbation() {
    let tmp = tempfile::tempdir().unwrap();
    let sample = synth(tmp.path(), &["--no-mpi"]);
    let aug = tmp.path().join("aug");
    let aug = aug.to_str().unwrap();
    let applied = json(&[
        "augment",
        "--input",
        &sample,
        "--out",
        aug,
        "--seed",
        "4",
        "--t-ref-x",
        "0.05",
        "--t-ref-y",
        "0.01",
    ]);
    let report = json(&["calib", "--sample", aug]);
    for key in ["t_x", "t_y", "c_x", "c_y"] {
        let want = applied["perturbation"][key].as_f64().unwrap();
        let got = report["recovered_delta"][key].as_f64().unwrap();
        // Sample files store 32-bit floats.
        assert!((got - want).abs() < 1e-6, "{key}: {got} vs {want}");
    }

    // convt renders the fitted flow; evaluating it against gt_flow gives a small AEPE.
    let calib = tmp.path().join("calib.json");
    let flow = tmp.path().join("flow.pfm");
    let out = run(&[
        "calib",
        "--sample",
        aug,
        "--report",
        calib.to_str().unwrap(),
    ]);
    assert!(out.status.success() && out.stdout.is_empty());
    let out = run(&[
        "convt",
        "--sample",
        aug,
        "--calib",
        calib.to_str().unwrap(),
        "--out",
        flow.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval = json(&[
        "eval",
        "--sample",
        aug,
        "--flow-pred",
        flow.to_str().unwrap(),
    ]);
    assert!(eval["aepe"].as_f64().unwrap() < 1e-4);
}

#[test]
fn refine_fit_does_not_increase_error() {
    let tmp = tempfile::tempdir().unwrap();
    let sample = synth(tmp.path(), &["--sigma", "0.002", "--bounce-samples", "4"]);
    let out = tmp.path().join("refined.pfm");
    let kernels = tmp.path().join("kernels.pfm");
    let report = json(&[
        "refine",
        "--sample",
        &sample,
        "--fit",
        "--iterations",
        "50",
        "--out",
        out.to_str().unwrap(),
        "--kernels-out",
        kernels.to_str().unwrap(),
    ]);
    assert!(out.is_file() && kernels.is_file());
    let first = report["initial_loss"].as_f64().unwrap();
    let last = report["final_loss"].as_f64().unwrap();
    assert!(last <= first, "{last} > {first}");

    let again = tmp.path().join("again.pfm");
    let applied = run(&[
        "refine",
        "--sample",
        &sample,
        "--kernels",
        kernels.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(
        applied.status.success(),
        "{}",
        String::from_utf8_lossy(&applied.stderr)
    );
}

#[test]
fn gradcheck_passes() {
    let report = json(&[
        "gradcheck",
        "--op",
        "all",
        "--seed",
        "1",
        "--instances",
        "2",
    ]);
    assert_eq!(report["pass"], true);
    assert_eq!(report["reports"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = run(&["calib", "--sample", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta"));

    let out = run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&[
        "refine",
        "--depth",
        "a.pfm",
        "--target",
        "b.pfm",
        "--variant",
        "bogus",
        "--fit",
        "--out",
        "c.pfm",
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn report_flag_writes_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("g.json");
    let out = run(&[
        "gradcheck",
        "--op",
        "warp",
        "--seed",
        "2",
        "--instances",
        "1",
        "--report",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["pass"], true);
}
