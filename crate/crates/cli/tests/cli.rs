use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn aquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquant"))
        .args(args)
        .env("AQUANT_THREADS", "2")
        .output()
        .expect("failed to spawn aquant")
}

fn ok(args: &[&str]) -> String {
    let out = aquant(args);
    assert!(
        out.status.success(),
        "aquant {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small workspace shared by the calibrate and evaluate tests.
fn small_data(tmp: &TempDir) -> std::path::PathBuf {
    let d = tmp.path().join("data");
    ok(&["gen", "--out", p(&d), "--seed", "5", "--n-calib", "64", "--n-eval", "32"]);
    d
}

#[test]
fn gen_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "--out", p(&a), "--seed", "9", "--n-calib", "40", "--n-eval", "20"]);
    ok(&["gen", "--out", p(&b), "--seed", "9", "--n-calib", "40", "--n-eval", "20"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let summary = read_json(&a.join("gen.json"));
    assert_eq!(summary["n_calib"], 40);
    assert_eq!(summary["n_eval"], 20);
    assert_eq!(summary["seed"], 9);
    assert_eq!(read_json(&a.join("calib/manifest.json"))["blobs"][0]["shape"][0], 40);

    let c = tmp.path().join("c");
    ok(&["gen", "--out", p(&c), "--seed", "10", "--n-calib", "40", "--n-eval", "20"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn calibrate_zero_iterations_and_rerun() {
    let tmp = TempDir::new().unwrap();
    let d = small_data(&tmp);
    let z = tmp.path().join("zero");
    ok(&[
        "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
        "--out", p(&z), "--iters", "0", "--border", "nearest",
    ]);
    let summary = read_json(&z.join("summary.json"));
    assert_eq!(summary["log_entries"], 0);
    assert_eq!(summary["initial_loss"], summary["final_loss"]);

    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
            "--out", p(&out), "--iters", "20", "--border", "quadratic", "--seed", "3",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    let entries = read_json(&a.join("summary.json"))["log_entries"].as_u64().unwrap() as usize;
    assert_eq!(log.lines().count(), entries + 2);
    assert!(entries > 0 && entries.is_multiple_of(20));
}

#[test]
fn evaluate_baseline_against_itself() {
    let tmp = TempDir::new().unwrap();
    let d = small_data(&tmp);
    let n = tmp.path().join("n");
    ok(&[
        "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
        "--out", p(&n), "--iters", "0", "--border", "nearest",
    ]);
    let e = tmp.path().join("e");
    let stdout = ok(&[
        "evaluate", "--fp", p(&d.join("model")), "--eval", p(&d.join("eval")),
        "--candidate", &format!("same={}", p(&n)), "--analytic", "--out", p(&e),
    ]);
    assert!(stdout.contains("same"));
    let csv = fs::read_to_string(e.join("same.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config=same"));
    assert_eq!(lines.next().unwrap(), "layer_id,mse_quant,mse_baseline,superior_ratio,n_positions");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[1], cols[2], "an identical model must match the baseline");
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
    }
    let report = read_json(&e.join("report.json"));
    let names: Vec<&str> = report["configs"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["nearest", "analytic", "same"]);
}

#[test]
fn oracle_passes_and_detects_sign_mutation() {
    let tmp = TempDir::new().unwrap();
    let args = ["oracle", "--pairs", "50", "--grid", "401", "--mc-samples", "20000", "--instances", "50"];
    let stdout = ok(&[&args[..], &["--out", p(tmp.path())]].concat());
    assert!(stdout.contains("all oracle checks passed"));
    assert_eq!(read_json(&tmp.path().join("oracle.json"))["grid_violations"], 0);

    ok(&[&args[..], &["--zero-dw"]].concat());

    let out = aquant(&[&args[..], &["--mutate-sign"]].concat());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn overhead_of_synthetic_layers() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(&["overhead", "--conv", "64,16,3", "--border", "linear", "--out", p(tmp.path())]);
    assert!(stdout.contains("3.1250%"), "{stdout}");
    let report = read_json(&tmp.path().join("overhead.json"));
    assert_eq!(report["layers"][0]["border_params"], 2 * 144);

    let stdout = ok(&["overhead", "--conv", "64,16,3", "--border", "quadratic"]);
    assert!(stdout.contains("4.6875%"), "{stdout}");

    let stdout = ok(&["overhead"]);
    assert_eq!(stdout.lines().count(), 2);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    let out = aquant(&["calibrate", "--model", p(&missing), "--calib", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = aquant(&["overhead", "--conv", "64,16"]);
    assert_eq!(out.status.code(), Some(2));

    let d = small_data(&tmp);
    let out = aquant(&[
        "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
        "--out", p(&tmp.path().join("x")), "--bits-first-last", "eight",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = aquant(&[
        "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
        "--out", p(&tmp.path().join("x")), "--drop-prob", "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let summary = tmp.path().join("z");
    ok(&[
        "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
        "--out", p(&summary), "--iters", "0",
    ]);
    let mut cfg = read_json(&summary.join("summary.json"))["config"].clone();
    cfg["lr"]["v"] = 1e300.into();
    cfg["lr"]["step_a"] = 1e300.into();
    cfg["optimizer"] = "sgd".into();
    cfg["schedule"]["total_iters"] = 5.into();
    let cfg_path = tmp.path().join("diverge.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = aquant(&[
        "calibrate", "--model", p(&d.join("model")), "--calib", p(&d.join("calib")),
        "--out", p(&tmp.path().join("y")), "--config", p(&cfg_path),
    ]);
    assert_eq!(out.status.code(), Some(4));
}
