//! End-to-end exercise of every CLI path against a 32-image fixture tree:
//! prep -> train -> eval -> report -> gradcheck, plus the usage- and
//! data-error exits. The whole flow must finish inside 60 seconds.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fracnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(output: &Output, code: i32, context: &str) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "{context}: stdout={} stderr={}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_fixture_tree(root: &Path) {
    for (dir, class) in [("Fractured", 1usize), ("Non_fractured", 0usize)] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..16u64 {
            let raw = fracnet::synthetic::textured_image(64, class, 7000 + i * 11 + class as u64);
            let img = image::GrayImage::from_raw(64, 64, raw).unwrap();
            img.save(d.join(format!("img{i:03}.png"))).unwrap();
        }
    }
    // One undecodable file exercises the rejection log.
    std::fs::write(root.join("Fractured").join("broken.png"), b"").unwrap();
}

#[test]
fn full_pipeline_smoke() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("tree");
    write_fixture_tree(&tree);

    let split_path = dir.path().join("split.json");
    let prep = run(&[
        "prep",
        tree.to_str().unwrap(),
        "--seed",
        "7",
        "--ratios",
        "0.8,0.1,0.1",
        "--out",
        split_path.to_str().unwrap(),
    ]);
    assert_exit(&prep, 0, "prep");
    let split_text = std::fs::read_to_string(&split_path).unwrap();
    assert!(split_text.contains("\"rejected\""));
    assert!(split_text.contains("broken.png"));

    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{
  "model_name": "smoke",
  "width": 8,
  "input_extent": 64,
  "reduction": 4,
  "dilation": 2,
  "train": { "epochs": 2, "batch_size": 8, "seed": 5 }
}
"#,
    )
    .unwrap();
    let results = dir.path().join("results");
    let run_dir = results.join("run-smoke");
    let train = run(&[
        "train",
        split_path.to_str().unwrap(),
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_exit(&train, 0, "train");
    for artifact in [
        "config.json",
        "log.csv",
        "loss.csv",
        "accuracy.csv",
        "checkpoint/model.json",
        "checkpoint/params.tnsr",
        "checkpoint/optimizer.tnsr",
        "checkpoint/log.csv",
    ] {
        assert!(run_dir.join(artifact).is_file(), "missing {artifact}");
    }

    let checkpoint = run_dir.join("checkpoint");
    let eval = run(&[
        "eval",
        checkpoint.to_str().unwrap(),
        split_path.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&eval, 0, "eval");
    let metrics_text = std::fs::read_to_string(run_dir.join("metrics.json")).unwrap();
    for key in ["accuracy", "precision", "recall", "f1", "counts"] {
        assert!(metrics_text.contains(key), "metrics.json missing {key}");
    }

    let report = run(&["report", results.to_str().unwrap()]);
    assert_exit(&report, 0, "report");
    let table = String::from_utf8_lossy(&report.stdout);
    assert!(table.contains("Model TA TF1 TR TP"));
    assert!(table.contains("smoke "));
    assert!(results.join("comparison.txt").is_file());
    assert!(results.join("comparison.csv").is_file());

    let gradcheck = run(&["gradcheck"]);
    assert_exit(&gradcheck, 0, "gradcheck");
    let text = String::from_utf8_lossy(&gradcheck.stdout);
    assert!(text.contains("full_model"));
    assert!(text.contains("max relative error"));
    assert!(!text.contains("FAIL"));

    // Usage errors exit 1.
    let usage = run(&["train", split_path.to_str().unwrap(), "--bogus-flag", "x"]);
    assert_exit(&usage, 1, "unknown flag");
    let no_args = bin().output().unwrap();
    assert_exit(&no_args, 1, "missing subcommand");
    let bad_split = run(&[
        "eval",
        checkpoint.to_str().unwrap(),
        split_path.to_str().unwrap(),
        "--split",
        "holdout",
    ]);
    assert_exit(&bad_split, 1, "unknown split name");

    // Data errors exit 2.
    let missing_root = run(&["prep", dir.path().join("nope").to_str().unwrap()]);
    assert_exit(&missing_root, 2, "missing dataset root");

    // Tampered architecture: the recorded hash no longer matches.
    let model_json = checkpoint.join("model.json");
    let tampered = std::fs::read_to_string(&model_json)
        .unwrap()
        .replace("\"input_channels\": 3", "\"input_channels\": 4");
    std::fs::write(&model_json, tampered).unwrap();
    let mismatch = run(&[
        "eval",
        checkpoint.to_str().unwrap(),
        split_path.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&mismatch, 2, "architecture hash mismatch");
    let err_text = String::from_utf8_lossy(&mismatch.stderr);
    assert!(
        err_text.contains("architecture hash mismatch"),
        "stderr: {err_text}"
    );

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "smoke took {elapsed:.1}s");
}
