use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mapguide_lab::report::read_samples;
use mapguide_lab::TaskKind;
use serde_json::{json, Value};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(args)
        .output()
        .unwrap()
}

fn small_toy(dir: &Path) -> String {
    let mut v = serde_json::to_value(TaskKind::Toy.spec()).unwrap();
    v["n_chains"] = json!(8);
    let path = dir.join("toy.json");
    fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|f| f.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_toy(dir.path());
    let out = dir.path().join("out");
    let o = lab(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = read_json(&out.join("report.json"));
    let prov = read_json(&out.join("provenance.json"));
    assert_eq!(prov["seed"], 3);
    assert_eq!(report["provenance"], prov);

    let samples = read_samples(&out.join("samples.csv")).unwrap();
    assert_eq!(samples.len(), 8);
    let (header, _) = csv_rows(&out.join("samples.csv"));
    assert_eq!(header, ["chain", "dim0", "dim1"]);
    let std = mapguide_lab::diagnostics::per_dim_std(&samples).unwrap();
    let reported = report["summary"][0]["per_dim_std"].as_array().unwrap();
    for (a, b) in std.iter().zip(reported) {
        assert!((a - b.as_f64().unwrap()).abs() <= 1e-12);
    }

    let (header, rows) = csv_rows(&out.join("curves.csv"));
    assert_eq!(header[0], "t");
    let columns = report["curves"]["columns"].as_array().unwrap();
    assert_eq!(header.len(), columns.len() + 1);
    for (j, col) in columns.iter().enumerate() {
        assert_eq!(col["name"], header[j + 1]);
        for (i, v) in col["values"].as_array().unwrap().iter().enumerate() {
            assert!((rows[i][j + 1] - v.as_f64().unwrap()).abs() <= 1e-12);
        }
    }
    assert_eq!(rows.first().unwrap()[0], 100.0);
    assert_eq!(rows.last().unwrap()[0], 1.0);
}

#[test]
fn output_flags_suppress_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(TaskKind::Toy.spec()).unwrap();
    let out = dir.path().join("quiet");
    v["n_chains"] = json!(2);
    v["outputs"] = json!({"dir": out, "samples": false, "curves": false});
    let config = dir.path().join("c.json");
    fs::write(&config, v.to_string()).unwrap();
    let o = lab(&["run", "--config", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists());
    assert!(!out.join("samples.csv").exists());
    assert!(!out.join("curves.csv").exists());
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(TaskKind::Toy.spec()).unwrap();
    v["guidance"]["dsg_mix"] = json!(1.5);
    let config = dir.path().join("bad.json");
    fs::write(&config, v.to_string()).unwrap();
    let o = lab(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("guidance.dsg_mix"));

    fs::write(&config, "{ not json").unwrap();
    let o = lab(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_output_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_toy(dir.path());
    let o = lab(&["run", "--config", &config]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_reports_one_row_per_zeta() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_toy(dir.path());
    let out = dir.path().join("sweep");
    let o = lab(&[
        "sweep",
        "--config",
        &config,
        "--zeta",
        "0.05,0.3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    let zetas: Vec<f64> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["zeta"].as_f64().unwrap())
        .collect();
    assert_eq!(zetas, [0.05, 0.3]);
    assert!(out.join("curves.csv").exists());
}

#[test]
fn diagnose_exit_code_tracks_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let o = lab(&["diagnose", "--task", "toy", "--out", out.to_str().unwrap()]);
    let report = read_json(&out.join("report.json"));
    let passed = report["passed"].as_bool().unwrap();
    assert_eq!(o.status.code(), Some(if passed { 0 } else { 3 }));
    assert!(report["checks"].as_array().unwrap().len() >= 8);

    let o = lab(&["diagnose", "--task", "nope", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
