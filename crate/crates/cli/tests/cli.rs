mod common;

use advface::data::synth_faces;
use advface::detector::DetectorWeights;
use advface::evaluation::REPORT_SCHEMA;
use advface::generator::{generate, GeneratorWeights};
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
synth_detector_images = 24
synth_generator_images = 6
synth_eval_images = 10

[detector]
epochs = 2

[generator]
epochs = 1

[attack]
max_iter = 2

[eval]
figures = 1

[bench]
images = 10
cw_steps = 2
"#;

fn advface(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advface"))
        .args(args)
        .env("ADVFACE_OUTPUT", dir)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = advface(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "train-detector", "train-attack", "eval", "bench", "export-fig"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
        assert_eq!(code(&advface(dir.path(), &[cmd, "--help"])), 0, "{cmd} --help");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&advface(dir.path(), &["synth", "--bogus"])), 1);
    assert_eq!(code(&advface(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&advface(dir.path(), &["synth", "--n", "0"])), 1);
    assert_eq!(code(&advface(dir.path(), &["eval", "--jpeg", "0..100"])), 1);
    assert_eq!(code(&advface(dir.path(), &["bench", "--attacks", "gen,pgd"])), 1);
    assert_eq!(code(&advface(dir.path(), &["bench", "--assert-order", "gen<pgd"])), 1);
}

#[test]
fn unknown_config_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[attack]\nlamda = 0.5\n").unwrap();
    let out = advface(dir.path(), &["--config", path.to_str().unwrap(), "synth", "--n", "2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lamda"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = advface(dir.path(), &["train-detector", "--train-dir", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(code(&advface(dir.path(), &["eval"])), 1);
}

#[test]
fn synth_is_reproducible_and_honors_flag_over_file_and_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("seed.toml");
    std::fs::write(&cfg, "seed = 3\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = advface(out, &["--config", cfg, "--seed", "4", "synth", "--n", "5"]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    // env var picked the output root
    let csv_a = std::fs::read(a.join("synth/annotations.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("synth/annotations.csv")).unwrap());
    for i in 0..5 {
        let name = format!("synth/img_{i:05}.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    // the flag's seed won over the file's
    let expected = synth_faces(5, (64, 64), 4).unwrap();
    let mut loaded = advface::data::load_folder(&a.join("synth"), None).unwrap().set;
    for item in &mut loaded.items {
        item.image.source_path = None;
    }
    assert_eq!(loaded.items, expected.items);
    // --output beats the env var
    let c = dir.path().join("c");
    let res = advface(&a, &["--output", c.to_str().unwrap(), "synth", "--n", "1"]);
    assert_eq!(code(&res), 0);
    assert!(c.join("synth/img_00000.png").exists());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root);
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        advface(root, &full)
    };

    let out = run(&["train-detector"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let epochs = std::fs::read_to_string(root.join("detector_epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);
    for line in epochs.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    assert!(root.join("config.resolved.toml").exists());

    let out = run(&["train-attack"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = std::fs::read_to_string(root.join("attack_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 6);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "image_id", "m", "l2", "misclassify", "total", "phi_size", "wall_time"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let first_gen = std::fs::read(root.join("generator.ckpt")).unwrap();
    let out = run(&["train-attack"]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(root.join("generator.ckpt")).unwrap(), first_gen, "rerun must be bit-exact");

    let out = run(&["eval", "--sweep", "0.5,0.7,0.9", "--jpeg", "10..100"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let errors = common::validate(&schema, &report);
    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(report["sweep"].as_array().unwrap().len(), 3);
    assert_eq!(report["defense"]["points"].as_array().unwrap().len(), 10);
    assert!(root.join("eval/sweep.csv").exists());
    assert!(root.join("eval/defense.csv").exists());
    assert!(root.join("eval/figure_000.png").exists());

    let out = run(&["bench", "--assert-order", "cw<fgsm<gen"]);
    assert_eq!(code(&out), 2, "reversed order must fail: {}", stderr(&out));
    let csv = std::fs::read_to_string(root.join("bench/runtime.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus three attacks");

    let fig = root.join("fig.png");
    let out = run(&["export-fig", "--index", "2", "--file", fig.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(image_is_png(&fig));
    assert_eq!(code(&run(&["export-fig", "--index", "99"])), 1);
}

fn image_is_png(path: &Path) -> bool {
    std::fs::read(path).unwrap().starts_with(b"\x89PNG")
}

#[test]
fn detector_resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    let s = straight.to_str().unwrap();
    let p = split.to_str().unwrap();
    assert_eq!(code(&advface(dir.path(), &["--config", &cfg, "--output", s, "train-detector"])), 0);
    let out = advface(dir.path(), &["--config", &cfg, "--output", p, "train-detector", "--epochs", "1"]);
    assert_eq!(code(&out), 0);
    let state = split.join("detector_state.ckpt");
    let out = advface(
        dir.path(),
        &["--config", &cfg, "--output", p, "train-detector", "--resume", state.to_str().unwrap()],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = DetectorWeights::load(&straight.join("detector.ckpt")).unwrap();
    let b = DetectorWeights::load(&split.join("detector.ckpt")).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(std::fs::read_to_string(split.join("detector_epochs.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn zero_iterations_and_tiny_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path();
    assert_eq!(code(&advface(root, &["--config", &cfg, "train-detector", "--epochs", "1"])), 0);
    let out = advface(root, &["--config", &cfg, "train-attack", "--max-iter", "0", "--lambda", "1e-4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("almost identical"), "{}", stderr(&out));
    let g = GeneratorWeights::load(&root.join("generator.ckpt")).unwrap();
    let x = synth_faces(1, (64, 64), 0).unwrap().preprocessed((64, 64)).unwrap();
    assert!(generate(&x[0].image, &g).unwrap().values().iter().all(|&d| d == 0.0));
}

#[test]
fn schema_checker_rejects_bad_reports() {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let good = serde_json::json!({
        "detector_fingerprint": "a".repeat(64),
        "generator_fingerprint": "b".repeat(64),
        "images": 1, "total_faces": 2,
        "sweep": [{"alpha": 0.7, "clean_detected": 2, "attacked_detected": 0, "total_faces": 2}],
        "defense": null, "runtime": null
    });
    assert!(common::validate(&schema, &good).is_empty());
    let mut extra = good.clone();
    extra["surprise"] = Value::from(1);
    assert!(!common::validate(&schema, &extra).is_empty());
    let mut bad_alpha = good.clone();
    bad_alpha["sweep"][0]["alpha"] = Value::from(1.0);
    assert!(!common::validate(&schema, &bad_alpha).is_empty());
    let mut bad_hash = good;
    bad_hash["detector_fingerprint"] = Value::from("xyz");
    assert!(!common::validate(&schema, &bad_hash).is_empty());
}
