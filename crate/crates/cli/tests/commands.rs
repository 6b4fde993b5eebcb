use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn declab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_declab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quadratic_config(out: &Path, algorithm: &str) -> Value {
    json!({
        "algorithm": algorithm,
        "topology": {"kind": "ring", "n": 4},
        "compressor": "identity",
        "objective": {"kind": "quadratic", "d": 6, "cond": 10.0},
        "rounds": 500,
        "batch": "full",
        "eta": "auto",
        "gamma": "auto",
        "seed": 3,
        "output": out,
    })
}

fn write_config(dir: &TempDir, name: &str, cfg: &Value) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn value_of(report: &str, key: &str) -> f64 {
    let prefix = format!("{key} = ");
    report
        .lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{report}"))
        .parse()
        .unwrap()
}

#[test]
fn run_writes_one_row_per_round_plus_metadata() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("beer.csv");
    let cfg = write_config(&dir, "beer.json", &quadratic_config(&csv, "beer"));
    let out = declab(&["run", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));

    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 502);
    assert_eq!(lines[0], declab_core::CSV_HEADER);
    assert!(lines[501].starts_with("500,"));

    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("beer.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["alpha"], 1.0);
    assert!((meta["rho"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(meta["fstar"].is_number());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", &quadratic_config(&dir.path().join("unused.csv"), "beer"));
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = declab(&["run", "--config", &cfg, "--output", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.csv");
    let out = declab(&["run", "--config", &cfg, "--output", c.to_str().unwrap(), "--seed", "4"]);
    assert!(out.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn algorithms_share_round_zero_then_differ() {
    let dir = TempDir::new().unwrap();
    let mut rows = Vec::new();
    for algo in ["beer", "choco"] {
        let csv = dir.path().join(format!("{algo}.csv"));
        let mut cfg = quadratic_config(&csv, algo);
        cfg["compressor"] = json!("topk:2");
        cfg["rounds"] = json!(20);
        let path = write_config(&dir, &format!("{algo}.json"), &cfg);
        let out = declab(&["run", "--config", &path]);
        assert!(out.status.success(), "{}", stderr(&out));
        rows.push(std::fs::read_to_string(&csv).unwrap());
    }
    let beer: Vec<&str> = rows[0].lines().collect();
    let choco: Vec<&str> = rows[1].lines().collect();
    assert_eq!(beer[1], choco[1]);
    assert_ne!(beer[5], choco[5]);
}

#[test]
fn spectral_reports_known_gaps() {
    let out = declab(&["spectral", "--kind", "complete", "--n", "10"]);
    assert!(out.status.success());
    assert!((value_of(&stdout(&out), "rho") - 1.0).abs() < 1e-9);

    let out = declab(&["spectral", "--kind", "ring", "--n", "4"]);
    let report = stdout(&out);
    assert!((value_of(&report, "rho") - 2.0 / 3.0).abs() < 1e-9);
    assert!((value_of(&report, "1 - |lambda_2| (recomputed)") - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn spectral_rejects_non_square_grid() {
    let out = declab(&["spectral", "--kind", "grid", "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("perfect square"), "{}", stderr(&out));
}

#[test]
fn check_constants_search_then_verify() {
    let out = declab(&["check-constants", "--C", "4", "--search"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let report = stdout(&out);
    assert!(report.trim_end().ends_with("FEASIBLE"));
    let cg = value_of(&report, "c_gamma").to_string();
    let ce = value_of(&report, "c_eta").to_string();

    let out = declab(&["check-constants", "--C", "4", "--c-gamma", &cg, "--c-eta", &ce]);
    assert!(out.status.success());

    let out = declab(&[
        "check-constants", "--C", "4", "--c1", "1", "--c2", "1", "--c3", "1", "--c4", "1", "--c-gamma", "0.5",
        "--c-eta", "0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).trim_end().ends_with("INFEASIBLE"));
}

#[test]
fn compress_bench_contraction() {
    let out = declab(&["compress-bench", "--compressor", "identity", "--d", "20", "--trials", "50"]);
    let report = stdout(&out);
    assert!(out.status.success());
    assert_eq!(value_of(&report, "mean ||C(x)-x||^2/||x||^2"), 0.0);

    for (comp, d) in [("topk:5", "50"), ("gsgd:5", "123"), ("randk:3", "30")] {
        let out = declab(&["compress-bench", "--compressor", comp, "--d", d, "--trials", "2000", "--seed", "9"]);
        assert!(out.status.success(), "{comp}: {}", stdout(&out));
        assert!(stdout(&out).trim_end().ends_with("PASS"));
    }
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quadratic_config(&dir.path().join("x.csv"), "beer");
    cfg["topology"]["n"] = json!(-3);
    let path = write_config(&dir, "bad.json", &cfg);
    let out = declab(&["run", "--config", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("topology.n"), "{}", stderr(&out));

    let mut cfg = quadratic_config(&dir.path().join("x.csv"), "beer");
    cfg["compressor"] = json!("topk:0");
    let path = write_config(&dir, "bad2.json", &cfg);
    let out = declab(&["run", "--config", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("compressor"), "{}", stderr(&out));
}

#[test]
fn malformed_data_exits_with_line_number() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("train.libsvm");
    std::fs::write(&data, "+1 1:0.5 3:1\n-1 2:1\n+1 4:x\n-1 1:1\n").unwrap();
    let cfg = json!({
        "algorithm": "beer",
        "topology": {"kind": "ring", "n": 2},
        "compressor": "identity",
        "objective": {"kind": "logreg", "reg": 0.05},
        "data": {"path": data},
        "rounds": 5,
        "batch": 1,
        "eta": 0.1,
        "gamma": 0.5,
        "seed": 0,
        "output": dir.path().join("o.csv"),
    });
    let path = write_config(&dir, "c.json", &cfg);
    let out = declab(&["run", "--config", &path]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn runaway_step_reports_divergence() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quadratic_config(&dir.path().join("d.csv"), "dsgd");
    cfg["eta"] = json!(50.0);
    cfg["gamma"] = json!(1.0);
    let path = write_config(&dir, "d.json", &cfg);
    let out = declab(&["run", "--config", &path]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("round"), "{}", stderr(&out));
}

#[test]
fn logistic_run_on_synthetic_census_data() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("l.csv");
    let cfg = json!({
        "algorithm": "beer",
        "topology": {"kind": "erdos_renyi", "n": 5, "p": 0.6},
        "compressor": "gsgd:5",
        "objective": {"kind": "logreg", "reg": 0.05},
        "data": {"synthetic": {"samples": 400}, "partition": "shuffled"},
        "rounds": 30,
        "batch": 10,
        "eta": 0.1,
        "gamma": 0.4,
        "seed": 11,
        "output": csv,
        "metrics_every": 10,
    });
    let path = write_config(&dir, "l.json", &cfg);
    let out = declab(&["run", "--config", &path]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rounds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rounds, ["0", "10", "20", "30"]);
}
