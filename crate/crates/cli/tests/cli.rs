use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "repeats": 2,
  "dataset": { "num_classes": 4, "max_count": 40, "imbalance_factor": 10.0,
               "input_dim": 3, "test_per_class": 10 },
  "optimizer": { "epochs": 3, "batch_size": 16 },
  "hidden_layers": [8]
}"#;

fn ccar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_ok(args: &[&str]) {
    let out = ccar(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn golden(name: &str) -> String {
    fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn surface_matches_golden() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    run_ok(&[
        "surface",
        "--omega",
        "0.5",
        "--p-points",
        "3",
        "--f-points",
        "3",
        "--out",
        out,
    ]);
    assert_eq!(
        fs::read_to_string(tmp.path().join("surface.csv")).unwrap(),
        golden("surface_3x3_omega0.5.csv")
    );
}

#[test]
fn gradcurves_match_golden() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    run_ok(&[
        "gradcurves",
        "--omega",
        "0.75",
        "--f-list",
        "0.05,0.5",
        "--points",
        "4",
        "--out",
        out,
    ]);
    assert_eq!(
        fs::read_to_string(tmp.path().join("gradcurves.csv")).unwrap(),
        golden("gradcurves_omega0.75.csv")
    );
}

#[test]
fn full_surface_has_expected_rows() {
    let tmp = TempDir::new().unwrap();
    run_ok(&["surface", "--out", tmp.path().to_str().unwrap()]);
    let text = fs::read_to_string(tmp.path().join("surface.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 101 * 99);
    assert!(!text.contains('\r'));
}

#[test]
fn train_is_byte_identical_across_reruns_and_jobs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run_ok(&[
        "train",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        header(&a.join("metrics.csv")),
        golden("metrics_header.txt").trim_end()
    );
    // two runs and one aggregate row
    assert_eq!(String::from_utf8(metrics).unwrap().lines().count(), 4);
}

#[test]
fn sweep_emits_one_row_per_omega() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&[
        "sweep-omega",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
    ]);
    run_ok(&[
        "sweep-omega",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--jobs",
        "3",
    ]);
    let text = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("sweep.csv")).unwrap());
    assert_eq!(
        header(&a.join("sweep.csv")),
        golden("sweep_header.txt").trim_end()
    );
    let omegas: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(omegas.len(), 4);
    assert!(omegas[0].starts_with("2.5"));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["gen-data", "--config", &cfg, "--out", b.to_str().unwrap()]);
    for name in ["train.csv", "test.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap()
        );
        assert_eq!(header(&a.join(name)), "feature_0,feature_1,feature_2,label");
    }
    let test_rows = fs::read_to_string(a.join("test.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(test_rows, 1 + 4 * 10);
}

#[test]
fn flags_override_file_and_are_echoed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("o");
    run_ok(&[
        "surface",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--omega",
        "0.5",
        "--if",
        "20",
        "--base",
        "la",
        "--ccar",
        "off",
        "--repeats",
        "3",
        "--p-points",
        "2",
        "--f-points",
        "2",
    ]);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["seed"], 9);
    assert_eq!(resolved["repeats"], 3);
    assert_eq!(resolved["loss"]["omega"], 0.5);
    assert_eq!(resolved["loss"]["base"], "la");
    assert_eq!(resolved["loss"]["ccar_enabled"], false);
    assert_eq!(resolved["dataset"]["imbalance_factor"], 20.0);
    assert_eq!(resolved["dataset"]["num_classes"], 4);
}

#[test]
fn check_passes_with_status_zero() {
    let out = ccar(&["check"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("jump bound (sup 0.45"));
    assert!(text.contains("0 failed"));
}

#[test]
fn failing_property_exits_with_one() {
    let out = ccar(&["check", "--sign-flip-canary"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("derivative consistency"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{ "repeats": 2, "learning_rate": 0.1 }"#).unwrap();
    let zero = tmp.path().join("zero.json");
    fs::write(&zero, r#"{ "repeats": 0 }"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["surface", "--omega", "1.5", "--out", out],
        vec!["surface", "--omega", "0", "--out", out],
        vec!["surface", "--base", "hinge", "--out", out],
        vec!["surface", "--ccar", "maybe", "--out", out],
        vec!["train", "--if", "0.5", "--out", out],
        vec!["train", "--config", bad.to_str().unwrap(), "--out", out],
        vec!["train", "--config", zero.to_str().unwrap(), "--out", out],
        vec!["train", "--config", "/nonexistent/cfg.json", "--out", out],
        vec!["surface", "--p-points", "1", "--out", out],
        vec!["sweep-omega", "--omegas", "0.5,1.2", "--out", out],
        vec!["no-such-command"],
    ];
    for args in cases {
        assert_eq!(ccar(&args).status.code(), Some(2), "{args:?}");
    }
}
