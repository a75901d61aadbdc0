//! End-to-end CLI tests driven through the compiled binary.
//!
//! Dataset-dependent commands run against tiny synthetic IDX fixtures, so no
//! real data files are required.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn featherlite() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featherlite"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    featherlite()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// Writes a small but trainable MNIST-format fixture: 28x28 images whose
/// bright quadrant encodes the class.
fn write_fixture(root: &Path, n_train: usize, n_test: usize) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    let image = |class: u8| -> Vec<u8> {
        let mut px = vec![20u8; 28 * 28];
        let (y0, x0) = match class {
            0 => (0, 0),
            1 => (0, 14),
            2 => (14, 0),
            _ => (14, 14),
        };
        for y in y0..y0 + 14 {
            for x in x0..x0 + 14 {
                px[y * 28 + x] = 230;
            }
        }
        px
    };
    let write_split = |prefix: &str, n: usize| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        images.extend_from_slice(&2051u32.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        labels.extend_from_slice(&2049u32.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let class = (i % 4) as u8;
            images.extend_from_slice(&image(class));
            labels.push(class);
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
    };
    write_split("train", n_train);
    write_split("t10k", n_test);
}

fn tiny_config(root: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "dataset": "mnist",
        "seed": 7,
        "threads": 1,
        "stage_caps": {"s1": 1, "s2_head": 1, "s2_full": 1, "s3_per_fold": 1},
        "folds": 6,
        "val_split": 16,
        "limits": {"train": 64, "val": 16, "test": 16}
    });
    let path = root.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "mnist", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("fetch-data"));
}

#[test]
fn missing_data_is_a_runtime_error_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["train", "mnist", "--data-dir", "does-not-exist", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error"), "stderr: {}", stderr(&out));
}

#[test]
fn train_eval_bench_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture(&root.join("data"), 96, 16);
    let cfg = tiny_config(root);

    // Full pipeline on the fixture.
    let out = run(
        &[
            "train",
            "mnist",
            "--stage",
            "all",
            "--config",
            cfg.to_str().unwrap(),
            "--data-dir",
            "data",
            "--out",
            "run",
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("test accuracy"), "stdout: {text}");
    assert!(text.contains("trainable parameters: 14,862"), "stdout: {text}");

    for artifact in [
        "run/run_manifest.json",
        "run/stage_s1/model1.manifest.json",
        "run/stage_s1/model2.weights.bin",
        "run/stage_s1/metrics.csv",
        "run/stage_s2_head/ckpt.manifest.json",
        "run/stage_s2_full/ckpt.weights.bin",
        "run/stage_s3/fold0.manifest.json",
        "run/final/final.manifest.json",
        "run/final/report.json",
        "run/final/report.txt",
        "run/final/confusion.csv",
    ] {
        assert!(root.join(artifact).exists(), "missing {artifact}");
    }

    // Evaluate the final checkpoint; report layout mirrors the published
    // tables.
    let out = run(
        &[
            "eval",
            "mnist",
            "--model",
            "run/final/final.manifest.json",
            "--data-dir",
            "data",
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("Macro Avg"), "stdout: {text}");
    assert!(text.contains("Weighted Avg"), "stdout: {text}");
    assert!(text.contains("Precision"), "stdout: {text}");

    // Benchmark the checkpoint with a small sweep.
    let out = run(
        &[
            "bench",
            "--model",
            "run/final/final",
            "--reps",
            "5",
            "--warmup",
            "2",
            "--max-batch-exp",
            "3",
            "--out",
            "bench_out",
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for artifact in [
        "bench_out/latency.json",
        "bench_out/throughput.csv",
        "bench_out/throughput.svg",
        "bench_out/size.json",
        "bench_out/summary.json",
    ] {
        assert!(root.join(artifact).exists(), "missing {artifact}");
    }
    let size: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("bench_out/size.json")).unwrap())
            .unwrap();
    assert_eq!(size["summary"], "14,862 (58.05 KB)");

    // Regenerate derived files from the run directory alone.
    let out = run(&["report", "run"], root);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(root.join("run/report/curves_s1.csv").exists());
    assert!(root.join("run/report/curves_s1.svg").exists());
    assert!(root.join("run/report/summary.json").exists());
}

#[test]
fn identical_runs_produce_identical_manifests_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture(&root.join("data"), 64, 8);
    let cfg = tiny_config(root);

    for out_dir in ["run_a", "run_b"] {
        let out = run(
            &[
                "train",
                "mnist",
                "--config",
                cfg.to_str().unwrap(),
                "--data-dir",
                "data",
                "--out",
                out_dir,
            ],
            root,
        );
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    let manifest_a = std::fs::read(root.join("run_a/run_manifest.json")).unwrap();
    let manifest_b = std::fs::read(root.join("run_b/run_manifest.json")).unwrap();
    // The manifests embed the out dir, which differs; compare config hashes.
    let a: serde_json::Value = serde_json::from_slice(&manifest_a).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&manifest_b).unwrap();
    assert_eq!(a["version"], b["version"]);

    let weights_a = std::fs::read(root.join("run_a/final/final.weights.bin")).unwrap();
    let weights_b = std::fs::read(root.join("run_b/final/final.weights.bin")).unwrap();
    assert_eq!(weights_a, weights_b);
}

#[test]
fn fetch_data_from_local_dir_installs_and_verifies() {
    // Round-trip: gzip the fixture files as a local mirror, then fetch-data
    // must reject them (checksums differ from the canonical datasets).
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mirror = root.join("mirror");
    std::fs::create_dir_all(&mirror).unwrap();
    write_fixture(&root.join("staging"), 8, 4);
    for name in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        let bytes = std::fs::read(root.join("staging/mnist").join(name)).unwrap();
        let file = std::fs::File::create(mirror.join(format!("{name}.gz"))).unwrap();
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        std::io::Write::write_all(&mut enc, &bytes).unwrap();
        enc.finish().unwrap();
    }
    let out = run(
        &[
            "fetch-data",
            "mnist",
            "--data-dir",
            "data",
            "--from-dir",
            "mirror",
        ],
        root,
    );
    // Non-canonical payloads must fail the pinned checksum.
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("checksum mismatch"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn env_var_supplies_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture(&root.join("envdata"), 64, 8);
    let cfg = tiny_config(root);
    let out = featherlite()
        .args([
            "train",
            "mnist",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "run",
        ])
        .env("FEATHERLITE_DATA_DIR", root.join("envdata"))
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
}
