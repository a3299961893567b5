use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use robustgnss_cli::RunConfig;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robustgnss"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_owned).collect()
}

const SMALL: &str = r#"{"scenario": {"duration": 20}}"#;
const NOISELESS: &str = r#"{"scenario": {"duration": 30, "noise_sigma": 0}}"#;

#[test]
fn simulate_row_counts_and_clean_faults() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let base = dir.path().join("out");
    assert_eq!(data_rows(&base.join("truth.csv")).len(), 20);
    let obs = fs::read_to_string(base.join("observations.jsonl")).unwrap();
    let n_obs = obs.lines().count();
    // Every default satellite is above the mask at the default site.
    assert_eq!(n_obs, 20 * 8);
    let faults = data_rows(&base.join("faults.csv"));
    assert_eq!(faults.len(), n_obs);
    assert!(faults.iter().all(|r| r.ends_with(",false,0")));
    let raw = fs::read(base.join("truth.csv")).unwrap();
    assert!(!raw.contains(&b'\r'));
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "{\"scenario\": {\"duration\": 20,");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"solver": {"max_iteration": 5}}"#);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("solver.max_iteration"), "{}", stderr(&out));
}

#[test]
fn missing_config_is_io_error() {
    let out = run(&["simulate", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn simulate_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"scenario": {"duration": 15}, "fault": {"probability": 0.3}}"#);
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["simulate", "--config", cfg, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&run(&["simulate", "--config", cfg, "--out", b.to_str().unwrap()])), 0);
    for f in ["observations.jsonl", "truth.csv", "faults.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    assert_eq!(code(&run(&["simulate", "--config", cfg, "--seed", "99", "--out", c.to_str().unwrap()])), 0);
    assert_ne!(fs::read(a.join("faults.csv")).unwrap(), fs::read(c.join("faults.csv")).unwrap());
}

fn simulate_into(dir: &Path, config: &str) -> PathBuf {
    let cfg = write_config(dir, config);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    cfg
}

#[test]
fn noiseless_solve_recovers_truth() {
    let dir = TempDir::new().unwrap();
    let cfg = simulate_into(dir.path(), NOISELESS);
    let obs_path = dir.path().join("out/observations.jsonl");
    let before = fs::read(&obs_path).unwrap();
    let out = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--observations",
        obs_path.to_str().unwrap(),
        "--set",
        "io.truth=out/truth.csv",
        "--set",
        "robust.scheme=l2",
        "--out",
        dir.path().join("solved").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&obs_path).unwrap(), before, "input modified");

    let solved = dir.path().join("solved");
    let header = fs::read_to_string(solved.join("estimate.csv")).unwrap();
    assert!(header.starts_with("t,x,y,z,clock,tropo,n_sats,converged\n"));
    assert_eq!(data_rows(&solved.join("estimate.csv")).len(), 30);
    assert!(!data_rows(&solved.join("iterations.csv")).is_empty());
    for row in data_rows(&solved.join("rsos.csv")) {
        let e: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(e < 1e-5, "rsos {e}");
    }
}

#[test]
fn switch_solve_reports_depressed_switches_on_faulted_epochs() {
    let dir = TempDir::new().unwrap();
    let cfg = simulate_into(
        dir.path(),
        r#"{"scenario": {"duration": 60}, "fault": {"probability": 0.2},
            "robust": {"scheme": "switch"}, "solver": {"max_iterations": 500}}"#,
    );
    let obs = dir.path().join("out/observations.jsonl");
    let out = run(&["solve", "--config", cfg.to_str().unwrap(), "--observations", obs.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let estimate = fs::read_to_string(dir.path().join("out/estimate.csv")).unwrap();
    assert!(estimate.lines().next().unwrap().ends_with(",mean_switch"));
    let switches: Vec<(String, f64)> = estimate
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_owned(), f[8].parse().unwrap())
        })
        .collect();
    let mut faults_per_epoch = std::collections::HashMap::<String, usize>::new();
    for row in data_rows(&dir.path().join("out/faults.csv")) {
        let f: Vec<&str> = row.split(',').collect();
        *faults_per_epoch.entry(f[0].to_owned()).or_default() += usize::from(f[2] == "true");
    }
    let mean = |pick: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = switches
            .iter()
            .filter(|(t, _)| pick(faults_per_epoch[t]))
            .map(|(_, s)| *s)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let clean = mean(&|n| n == 0);
    let faulted = mean(&|n| n >= 2);
    assert!(faulted < clean - 0.1, "faulted {faulted} clean {clean}");
}

#[test]
fn three_satellite_epoch_is_unobservable() {
    let dir = TempDir::new().unwrap();
    simulate_into(dir.path(), SMALL);
    let obs = fs::read_to_string(dir.path().join("out/observations.jsonl")).unwrap();
    let three: String = obs.lines().take(3).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("three.jsonl");
    fs::write(&path, three).unwrap();
    let cfg = dir.path().join("config.json");
    let out = run(&["solve", "--config", cfg.to_str().unwrap(), "--observations", path.to_str().unwrap()]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn solve_error_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = simulate_into(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let obs = dir.path().join("out/observations.jsonl");

    let missing = run(&["solve", "--config", cfg, "--observations", "/nonexistent.jsonl"]);
    assert_eq!(code(&missing), 3);

    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "{\"t\": 1}\n").unwrap();
    let parse = run(&["solve", "--config", cfg, "--observations", garbage.to_str().unwrap()]);
    assert_eq!(code(&parse), 2, "{}", stderr(&parse));

    let capped = dir.path().join("capped");
    let limit = run(&[
        "solve",
        "--config",
        cfg,
        "--observations",
        obs.to_str().unwrap(),
        "--set",
        "solver.max_iterations=1",
        "--set",
        "robust.scheme=switch",
        "--out",
        capped.to_str().unwrap(),
    ]);
    assert_eq!(code(&limit), 4, "{}", stderr(&limit));
    assert!(capped.join("estimate.csv").exists());
    assert!(capped.join("iterations.csv").exists());
    assert!(data_rows(&capped.join("estimate.csv")).iter().all(|r| r.contains(",false")));
}

const SWEEP: &str = r#"{
    "scenario": {"duration": 20},
    "solver": {"max_iterations": 300},
    "sweep": {"schemes": ["l2", "cauchy"], "p_grid": [0, 0.2, 0.4], "trials": 2}
}"#;

#[test]
fn sweep_rows_and_determinism_across_workers() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SWEEP);
    let cfg = cfg.to_str().unwrap();
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    let a = run(&["sweep", "--config", cfg, "--workers", "1", "--out", one.to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(stderr(&a).contains("[6/6]"));
    let b = run(&["sweep", "--config", cfg, "--workers", "4", "--out", four.to_str().unwrap()]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));

    let rows = data_rows(&one.join("sweep.csv"));
    assert_eq!(rows.iter().filter(|r| r.starts_with("l2,")).count(), 3);
    assert_eq!(rows.iter().filter(|r| r.starts_with("cauchy,")).count(), 3);
    for f in ["sweep.csv", "sweep.json"] {
        assert_eq!(fs::read(one.join(f)).unwrap(), fs::read(four.join(f)).unwrap(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(one.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}

#[test]
fn sweep_rejects_probability_above_ceiling() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SWEEP);
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--set", "sweep.p_grid=[0.1, 0.6]"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("0.49"), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_usage_is_config_error() {
    assert_eq!(code(&run(&["simulate"])), 2);
    assert_eq!(code(&run(&["frobnicate", "--config", "x"])), 2);
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--set", "scenario.duration"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_round_trips_through_json() {
    let text = r#"{
        "scenario": {"duration": 50, "rate": 2, "noise_sigma": 0.5},
        "fault": {"probability": 0.25, "sigma_fault": 40},
        "robust": {"scheme": "huber"},
        "sweep": {"schemes": ["l2", "maxmix"], "trials": 3}
    }"#;
    let parsed: RunConfig = serde_json::from_str(text).unwrap();
    let again: RunConfig = serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
    assert_eq!(parsed, again);
    parsed.validate().unwrap();
}
