use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specprefetch"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn small_models(dir: &Path) {
    ok_json(
        dir,
        &[
            "gen-model",
            "--layers",
            "2",
            "--model-dim",
            "32",
            "--heads",
            "4",
            "--seed",
            "3",
            "-o",
            "m.json",
        ],
    );
    let rep = ok_json(dir, &["skew", "--model", "m.json", "--calib-seed", "1", "-o", "s.json"]);
    assert!(rep["max_abs_forward_deviation"].as_f64().unwrap() <= 1e-3);
    let layers = rep["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    let decay = layers[0]["sigma_decay"].as_array().unwrap();
    assert_eq!(decay[0].as_f64(), Some(1.0));
    assert!(decay.windows(2).all(|w| w[0].as_f64() >= w[1].as_f64()));
}

#[test]
fn run_writes_reproducible_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_models(d);
    let args = |o: &'static str| {
        vec![
            "run",
            "--model",
            "s.json",
            "--scheme",
            "infinigen",
            "--prompt-len",
            "40",
            "--gen-len",
            "4",
            "--seed",
            "9",
            "--capture",
            "-o",
            o,
        ]
    };
    let a = ok_json(d, &args("a.json"));
    ok_json(d, &args("b.json"));
    assert_eq!(
        std::fs::read(d.join("a.json")).unwrap(),
        std::fs::read(d.join("b.json")).unwrap()
    );
    let trace: Value = serde_json::from_slice(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(trace["format"], "specprefetch-trace");
    assert_eq!(trace["iterations"].as_array().unwrap().len(), 4);
    assert!(a["summary"]["recall"].as_f64().is_some());
}

#[test]
fn bench_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_models(d);
    std::fs::write(d.join("cost.toml"), "pcie_bandwidth = 8e9\n").unwrap();
    let doc = ok_json(
        d,
        &[
            "bench",
            "--model",
            "s.json",
            "--prompt-len",
            "32",
            "--gen-len",
            "3",
            "--workload",
            "shifting",
            "--switch-at",
            "1",
            "--cost-config",
            "cost.toml",
            "-o",
            "bench.json",
            "--csv",
            "bench.csv",
        ],
    );
    assert_eq!(doc["cost_params"]["pcie_bandwidth"].as_f64(), Some(8e9));
    let schemes = doc["schemes"].as_array().unwrap();
    assert_eq!(schemes.len(), 5);
    let full = schemes.iter().find(|s| s["scheme"] == "full").unwrap();
    assert_eq!(full["byte_ratio"].as_f64(), Some(1.0));
    assert!((full["cosine"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let csv = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 3 * 2);

    ok_json(
        d,
        &[
            "run",
            "--model",
            "s.json",
            "--scheme",
            "h2o",
            "--prompt-len",
            "32",
            "--gen-len",
            "2",
            "-o",
            "t.json",
        ],
    );
    let out = cli(d, &["report", "--traces", "t.json", "--metrics", "bytes"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("scheme,iteration,layer,bytes"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
}

#[test]
fn validation_failures_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_models(d);
    let e = err_json(&cli(d, &["run", "--model", "m.json", "-o", "x.json"]));
    assert_eq!(e["error"], "not_skewed");
    let e = err_json(&cli(d, &["run", "--model", "s.json", "--alpha", "-1", "-o", "x.json"]));
    assert_eq!(e["error"], "invalid_argument");
    let e = err_json(&cli(
        d,
        &[
            "run",
            "--model",
            "s.json",
            "--scheme",
            "h2o",
            "--pool-limit",
            "10",
            "-o",
            "x.json",
        ],
    ));
    assert_eq!(e["error"], "invalid_argument");
    let e = err_json(&cli(
        d,
        &["run", "--model", "s.json", "--scheme", "bogus", "-o", "x.json"],
    ));
    assert_eq!(e["error"], "usage");
    let e = err_json(&cli(d, &["skew", "--model", "s.json", "-o", "t.json"]));
    assert_eq!(e["error"], "already_skewed");
    let e = err_json(&cli(
        d,
        &["gen-model", "--model-dim", "30", "--heads", "4", "-o", "bad.json"],
    ));
    assert_eq!(e["error"], "validation");
    std::fs::write(d.join("junk.json"), "{").unwrap();
    let e = err_json(&cli(d, &["run", "--model", "junk.json", "-o", "x.json"]));
    assert_eq!(e["error"], "manifest");
}
