//! Drives the `probadapt` binary end to end on small synthetic streams.

use std::path::Path;
use std::process::{Command, Output};

use probadapt::cli::{ResultsFile, EXIT_CONFIG, EXIT_RUNTIME, RESULTS_SCHEMA_VERSION};

fn probadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probadapt"))
        .args(args)
        .env_remove("PROBADAPT_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![
        "run",
        "--synth",
        "--tasks",
        "2",
        "--classes-per-task",
        "2",
        "--samples-per-class",
        "20",
        "--dim",
        "16",
        "--epochs",
        "1",
        "--samples",
        "4",
        "--memory-budget",
        "8",
        "--seed",
        "3",
        "-q",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    probadapt(&args)
}

#[test]
fn run_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = small_run(&run, &["--phndd"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("avg ") && stdout.contains("last "),
        "{stdout}"
    );
    for f in ["results.json", "memory.json", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let results = ResultsFile::load(run.join("results.json")).unwrap();
    assert_eq!(results.schema_version, RESULTS_SCHEMA_VERSION);
    assert_eq!(results.accuracy_matrix.len(), 2);
    assert_eq!(results.accuracy_matrix[1].len(), 2);
    assert_eq!(results.class_order.len(), 4);
    assert_eq!(results.metrics.phndd.len(), 1);
    assert!(results.memory.len() <= 8);

    let eval = probadapt(&["eval", run.to_str().unwrap()]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["task_accuracy"].as_array().unwrap().len(), 2);

    let plots = dir.path().join("plots");
    let plot = probadapt(&[
        "plot",
        run.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(
        plot.status.success(),
        "{}",
        String::from_utf8_lossy(&plot.stderr)
    );
    let svg = std::fs::read_to_string(plots.join("accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(plots.join("centroids_0.svg").exists());
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(small_run(&a, &[]).status.success());
    assert!(small_run(&b, &[]).status.success());
    let ra = ResultsFile::load(a.join("results.json")).unwrap();
    let rb = ResultsFile::load(b.join("results.json")).unwrap();
    assert_eq!(ra.accuracy_matrix, rb.accuracy_matrix);
    let wa = std::fs::read(a.join("checkpoint/adapters.1.w_mu.f32")).unwrap();
    let wb = std::fs::read(b.join("checkpoint/adapters.1.w_mu.f32")).unwrap();
    assert_eq!(wa, wb);
}

#[test]
fn exported_store_feeds_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let export = probadapt(&[
        "export-features",
        "--tasks",
        "2",
        "--classes-per-task",
        "2",
        "--samples-per-class",
        "10",
        "--dim",
        "8",
        "--out",
        store.to_str().unwrap(),
    ]);
    assert!(
        export.status.success(),
        "{}",
        String::from_utf8_lossy(&export.stderr)
    );
    assert!(store.join("manifest.json").exists());
    let run = dir.path().join("run");
    let out = probadapt(&[
        "run",
        "--store",
        store.to_str().unwrap(),
        "--tasks",
        "2",
        "--epochs",
        "1",
        "--samples",
        "2",
        "--memory-budget",
        "4",
        "-q",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let no_source = probadapt(&["run", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(no_source.status.code(), Some(EXIT_CONFIG as i32));

    let bad_flag = probadapt(&["run", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));

    let zero_budget = small_run(&dir.path().join("z"), &["--memory-budget", "0"]);
    assert_eq!(zero_budget.status.code(), Some(EXIT_CONFIG as i32));

    let missing = probadapt(&["eval", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(EXIT_RUNTIME as i32));
}
