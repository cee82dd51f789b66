use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn apsel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apsel"))
        .args(args)
        .current_dir(dir)
        .env("APSEL_LOG", "info")
        .output()
        .expect("apsel runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = apsel(dir, args);
    assert!(
        out.status.success(),
        "apsel {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_scenario(dir: &Path) {
    ok(
        dir,
        &[
            "gen-scenario",
            "--aps",
            "12",
            "--side-km",
            "0.4",
            "--seed",
            "3",
            "-o",
            "s.json",
        ],
    );
}

fn small_run(dir: &Path, out: &str) {
    ok(
        dir,
        &[
            "train",
            "-s",
            "s.json",
            "--n-graphs",
            "1",
            "--k-train",
            "2",
            "--epochs",
            "1",
            "--val-graphs",
            "0",
            "-o",
            out,
        ],
    );
}

#[test]
fn gen_scenario_reports_density() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "gen-scenario",
            "--aps",
            "100",
            "--side-km",
            "1.0",
            "--seed",
            "7",
            "-o",
            "s.json",
        ],
    );
    assert_eq!(out.trim(), "100 APs, 100.0 APs/km²");
    let out = ok(
        dir.path(),
        &[
            "gen-scenario",
            "--aps",
            "50",
            "--side-km",
            "2.0",
            "--resolution-m",
            "40",
            "-o",
            "s2.json",
        ],
    );
    assert_eq!(out.trim(), "50 APs, 12.5 APs/km²");
    let file = read_json(&dir.path().join("s.json"));
    assert_eq!(file["version"], 1);
    assert_eq!(file["seed"], 7);
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = apsel(dir.path(), &["gen-scenario", "-o", "missing/s.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = apsel(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = apsel(dir.path(), &["train", "-s", "absent.json", "-o", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smallest_training_run_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    small_scenario(dir.path());
    let start = std::time::Instant::now();
    small_run(dir.path(), "run");
    assert!(start.elapsed().as_secs() < 10);
    let run = dir.path().join("run");
    for f in [
        "config.json",
        "trace.csv",
        "final.json",
        "report.json",
        "checkpoints/step_1.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("# config: "));
    assert_eq!(lines.next().unwrap(), "step,epoch,graph_id,loss");
    assert_eq!(lines.count(), 1);
    let ckpt = read_json(&run.join("final.json"));
    assert_eq!(ckpt["hidden_dim"], 12);
    assert_eq!(ckpt["training_step_count"], 1);
    assert_eq!(ckpt["run_config"]["command"], "train");
}

#[test]
fn same_seeds_give_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    small_scenario(dir.path());
    small_run(dir.path(), "a");
    small_run(dir.path(), "b");
    for f in ["final.json", "trace.csv", "report.json", "config.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn eval_writes_reports_and_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scenario(d);
    small_run(d, "run");
    ok(
        d,
        &[
            "eval",
            "-s",
            "s.json",
            "-m",
            "run/final.json",
            "--n-graphs",
            "2",
            "-o",
            "ev",
        ],
    );
    for f in ["report.json", "metrics.csv", "pr_curve.csv", "roc_curve.csv"] {
        assert!(d.join("ev").join(f).exists(), "{f} missing");
    }
    let report = read_json(&d.join("ev/report.json"));
    assert_eq!(report["ap_count"], 12);
    assert_eq!(report["config"]["command"], "eval");
    assert!(report["precision"].is_number());

    let out = ok(
        d,
        &[
            "eval",
            "-s",
            "s.json",
            "--baseline-only",
            "--n-graphs",
            "2",
            "-o",
            "base",
        ],
    );
    assert!(out.contains("closest-3"));
    let report = read_json(&d.join("base/report.json"));
    assert!(report["precision"].is_null());
    assert_eq!(report["baselines"].as_array().unwrap().len(), 2);

    ok(
        d,
        &["gen-scenario", "--aps", "10", "--side-km", "0.4", "-o", "other.json"],
    );
    let out = apsel(d, &["eval", "-s", "other.json", "-m", "run/final.json", "-o", "bad"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_reuses_and_refreshes_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scenario(d);
    small_run(d, "run");
    std::fs::write(d.join("ues.json"), "[[0.1, 0.2]]").unwrap();
    let args = [
        "predict",
        "-s",
        "s.json",
        "-m",
        "run/final.json",
        "--ues",
        "ues.json",
        "--cache",
        "c.json",
    ];
    let first = apsel(d, &args);
    let second = apsel(d, &args);
    assert!(first.status.success() && second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert!(String::from_utf8_lossy(&second.stderr).contains("embedding cache hit"));

    let out: Value = serde_json::from_slice(&first.stdout).unwrap();
    let p = &out["predictions"][0];
    let master = p["master_ap"].as_u64().unwrap();
    let selected: Vec<u64> = p["selected_aps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert!(selected.contains(&master));
    for link in p["links"].as_array().unwrap() {
        let c = link["confidence"].as_f64().unwrap();
        let ap = link["ap"].as_u64().unwrap();
        assert_eq!(link["selected"].as_bool().unwrap(), ap == master || c > 0.5);
    }

    // A different model invalidates the cache.
    ok(
        d,
        &[
            "train",
            "-s",
            "s.json",
            "--n-graphs",
            "1",
            "--k-train",
            "2",
            "--epochs",
            "1",
            "--val-graphs",
            "0",
            "--seed",
            "5",
            "-o",
            "run2",
        ],
    );
    let third = apsel(
        d,
        &[
            "predict",
            "-s",
            "s.json",
            "-m",
            "run2/final.json",
            "--ues",
            "ues.json",
            "--cache",
            "c.json",
        ],
    );
    assert!(third.status.success());
    assert!(String::from_utf8_lossy(&third.stderr).contains("regenerating"));

    std::fs::write(d.join("far.json"), "[[5.0, 0.2]]").unwrap();
    let out = apsel(
        d,
        &["predict", "-s", "s.json", "-m", "run/final.json", "--ues", "far.json"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn build_dataset_writes_labeled_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scenario(d);
    let out = ok(
        d,
        &[
            "build-dataset",
            "-s",
            "s.json",
            "--n-graphs",
            "2",
            "--split",
            "validation",
            "--k-min",
            "3",
            "--k-max",
            "6",
            "--c-ue",
            "5",
            "-o",
            "data",
        ],
    );
    assert!(out.starts_with("2 graphs"));
    let g = read_json(&d.join("data/graph_0001.json"));
    let k = g["graph"]["ue_count"].as_u64().unwrap();
    assert!((3..=6).contains(&k));
    assert_eq!(g["graph"]["labels"].as_array().unwrap().len() as u64, k * 6);
    assert_eq!(g["config"]["dataset"]["split"], "validation");
}
