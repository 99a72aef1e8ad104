//! End-to-end CLI tests: exit codes, file outputs, determinism across
//! processes, and the full train/finetune/attack/evaluate/report/visualize
//! pipeline on a miniature run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cgnc")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("CGNC_DETERMINISTIC", "1")
        .output()
        .expect("spawn cgnc")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn smoke_config(dir: &Path, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "seed": seed,
        "output_dir": dir.join("run"),
        "data": {
            "image_size": 16,
            "train": {"kind": "synthetic-shapes", "num_classes": 4, "samples_per_class": 12,
                       "image_size": 16, "seed": 3, "split": "train"},
            "eval": {"kind": "synthetic-shapes", "num_classes": 4, "samples_per_class": 6,
                      "image_size": 16, "seed": 3, "split": "eval"}
        },
        "generator": {"base_width": 8, "res_blocks": 1, "cross_attention_count": 2},
        "train": {
            "epochs": 3,
            "learning_rate": 5e-4,
            "batch_size": 4,
            "surrogate": {"name": "surrogate", "train": {"widths": [8, 16], "epochs": 3, "seed": 5}}
        },
        "eval": {
            "victims": [
                {"name": "victim-a", "train": {"widths": [8, 16], "epochs": 2, "seed": 9}},
                {"name": "surrogate", "train": {"widths": [8, 16], "epochs": 3, "seed": 5}}
            ],
            "defenses": [{"kind": "none"}, {"kind": "jpeg", "quality": 80}],
            "n_samples": 8
        }
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// One trained run shared by the pipeline tests.
struct Fixture {
    dir: &'static Path,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir: &'static Path = Box::leak(Box::new(
            tempfile::tempdir().unwrap().keep(),
        ));
        let config = write_config(dir, &smoke_config(dir, 7));
        let out = run(&["train", config.to_str().unwrap()]);
        assert_exit(&out, 0);
        Fixture {
            dir,
            config,
            checkpoint: dir.join("run/checkpoint.cgnc"),
        }
    })
}

#[test]
fn missing_required_field_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 1);
    cfg["train"].as_object_mut().unwrap().remove("epochs");
    let path = write_config(dir.path(), &cfg);
    let out = run(&["train", path.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 1);
    cfg["train"]["no_such_knob"] = serde_json::json!(3);
    let path = write_config(dir.path(), &cfg);
    let out = run(&["train", path.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_knob"));
}

#[test]
fn train_writes_all_outputs() {
    let f = fixture();
    let run_dir = f.dir.join("run");
    for file in [
        "checkpoint.cgnc",
        "checkpoint_last.cgnc",
        "surrogate.clf",
        "metrics.jsonl",
        "config.resolved.json",
    ] {
        assert!(run_dir.join(file).is_file(), "{file} missing");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["loss"].as_f64().unwrap().is_finite());
    assert!(first.get("whitebox_hit_rate").is_some());
    assert!(first.get("timestamp").is_some());
}

#[test]
fn same_seed_gives_identical_checkpoints_across_processes() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_a = write_config(dir_a.path(), &smoke_config(dir_a.path(), 7));
    let cfg_b = write_config(dir_b.path(), &smoke_config(dir_b.path(), 7));
    assert_exit(&run(&["train", cfg_a.to_str().unwrap()]), 0);
    assert_exit(&run(&["train", cfg_b.to_str().unwrap()]), 0);
    let a = std::fs::read(dir_a.path().join("run/checkpoint.cgnc")).unwrap();
    let b = std::fs::read(dir_b.path().join("run/checkpoint.cgnc")).unwrap();
    assert_eq!(a, b, "identical config+seed must give identical checkpoints");

    // different seed via the flag override: flags win over the file
    let dir_c = tempfile::tempdir().unwrap();
    let cfg_c = write_config(dir_c.path(), &smoke_config(dir_c.path(), 7));
    assert_exit(&run(&["train", cfg_c.to_str().unwrap(), "--seed", "8"]), 0);
    let c = std::fs::read(dir_c.path().join("run/checkpoint.cgnc")).unwrap();
    assert_ne!(a, c, "a different seed must change the checkpoint");
}

#[test]
fn finetune_records_defaults_and_rejects_unknown_classes() {
    let f = fixture();
    let out = run(&["finetune", f.config.to_str().unwrap(), "--class", "red square"]);
    assert_exit(&out, 0);
    let tuned_path = f.dir.join("run/checkpoint_red-square.cgnc");
    assert!(tuned_path.is_file());
    let tuned = cgnc::training::load_checkpoint(&tuned_path).unwrap();
    assert_eq!(tuned.finetuned_class.as_deref(), Some("red square"));
    let meta = tuned.finetune.unwrap();
    assert_eq!(meta.mask_ratio, 0.2);
    assert_eq!(meta.epochs, 5);

    // --mask-ratio 0 records plain fine-tuning
    let out = run(&[
        "finetune",
        f.config.to_str().unwrap(),
        "--class",
        "red square",
        "--mask-ratio",
        "0",
        "--epochs",
        "1",
    ]);
    assert_exit(&out, 0);
    let tuned = cgnc::training::load_checkpoint(&tuned_path).unwrap();
    assert_eq!(tuned.finetune.unwrap().mask_ratio, 0.0);

    let out = run(&["finetune", f.config.to_str().unwrap(), "--class", "bogus"]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("red circle"), "should list classes: {stderr}");
}

fn write_test_image(path: &Path, seed: u64) {
    let img = ndarray::Array3::from_shape_fn((3, 16, 16), |(c, i, j)| {
        0.5 + 0.4 * ((seed as f64 + 1.0) * (c as f64 + 1.0) * (i as f64 * 2.3 + j as f64 * 1.7))
            .sin()
    })
    .mapv(|v: f64| v.clamp(0.0, 1.0));
    cgnc::evaluation::save_png(&img, path).unwrap();
}

#[test]
fn attack_epsilon_zero_roundtrips_exactly() {
    let f = fixture();
    let img_path = f.dir.join("input0.png");
    write_test_image(&img_path, 0);
    let out_dir = f.dir.join("attack-eps0");
    let out = run(&[
        "attack",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--target",
        "red circle",
        "--epsilon",
        "0",
        "--output-dir",
        out_dir.to_str().unwrap(),
        img_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max|delta| = 0.000000"), "{stdout}");
    let original = cgnc::evaluation::load_png(&img_path).unwrap();
    let adv = cgnc::evaluation::load_png(&out_dir.join("input0.adv.png")).unwrap();
    assert_eq!(original, adv, "epsilon 0 must round-trip the 8-bit image");
}

#[test]
fn attack_targets_differ_and_budget_holds() {
    let f = fixture();
    let img_path = f.dir.join("input1.png");
    write_test_image(&img_path, 1);
    let mut files = Vec::new();
    for (i, target) in ["red circle", "red square"].iter().enumerate() {
        let out_dir = f.dir.join(format!("attack-t{i}"));
        let out = run(&[
            "attack",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--target",
            target,
            "--output-dir",
            out_dir.to_str().unwrap(),
            img_path.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
        let stdout = String::from_utf8_lossy(&out.stdout);
        // default budget is 16/255
        let max_delta: f64 = stdout
            .split("max|delta| = ")
            .nth(1)
            .unwrap()
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(max_delta <= 16.0 / 255.0 + 1e-7, "{stdout}");
        assert!(stdout.contains("no classifier"), "{stdout}");
        files.push(std::fs::read(out_dir.join("input1.viz.png")).unwrap());
    }
    assert_ne!(files[0], files[1], "different targets must give different perturbations");

    let out = run(&[
        "attack",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--target",
        "red circle",
        "--output-dir",
        f.dir.join("attack-missing").to_str().unwrap(),
        f.dir.join("does-not-exist.png").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist.png"));
}

#[test]
fn evaluate_writes_reports_with_full_grid() {
    let f = fixture();
    let out = run(&["evaluate", f.config.to_str().unwrap()]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("victim"), "{stdout}");
    // the surrogate-as-victim rows are marked as white-box
    assert!(stdout.contains('*'), "white-box marker missing: {stdout}");

    let csv = std::fs::read_to_string(f.dir.join("run/report.csv")).unwrap();
    // header + |victims| x |targets| x |defenses|
    assert_eq!(csv.lines().count(), 1 + 2 * 4 * 2, "{csv}");

    let report =
        cgnc::evaluation::AttackReport::read_json(&f.dir.join("run/report.json")).unwrap();
    assert_eq!(report.rows.len(), 16);
    assert!(report.failures.is_empty());
    for row in &report.rows {
        assert_eq!(row.n_samples, 8);
        assert!((0.0..=1.0).contains(&row.asr));
    }
}

#[test]
fn evaluate_without_victims_is_a_config_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 7);
    cfg["eval"]["victims"] = serde_json::json!([]);
    // reuse the trained fixture's checkpoint
    let path = write_config(dir.path(), &cfg);
    let out = run(&[
        "evaluate",
        path.to_str().unwrap(),
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn report_rerenders_and_exports_csv() {
    let f = fixture();
    // ensure a report exists
    if !f.dir.join("run/report.json").is_file() {
        assert_exit(&run(&["evaluate", f.config.to_str().unwrap()]), 0);
    }
    let csv_out = f.dir.join("rerendered.csv");
    let out = run(&[
        "report",
        f.dir.join("run/report.json").to_str().unwrap(),
        "--csv",
        csv_out.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean ASR"));
    assert!(csv_out.is_file());
}

#[test]
fn visualize_builds_the_expected_grid() {
    let f = fixture();
    let a = f.dir.join("viz-a.png");
    let b = f.dir.join("viz-b.png");
    write_test_image(&a, 2);
    write_test_image(&b, 3);
    let out_path = f.dir.join("grid.png");
    let out = run(&[
        "visualize",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--target",
        "red circle",
        "--output",
        out_path.to_str().unwrap(),
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let grid = cgnc::evaluation::load_png(&out_path).unwrap();
    // two rows of [perturbation | adversarial] panels
    assert_eq!(grid.dim(), (3, 2 * 16, 2 * 16));
}
