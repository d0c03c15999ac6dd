use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ensemble_control::cli::{parse_config_str, CONTROL_HEADER, CONVERGENCE_HEADER};

const BIN: &str = env!("CARGO_BIN_EXE_ensemble-control");
const SMALL_SIT: &str = r#"{"model":"sit","schedule":{"k_min":2,"k_max":5},"seed":7,"grid":300}"#;

fn solve(config: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg("solve")
        .arg("--config")
        .arg(config)
        .args(extra)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn solve_writes_the_file_manifest_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SIT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = solve(&cfg, &["--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let table = String::from_utf8(o.stdout).unwrap();
        assert_eq!(table.lines().count(), 5);
    }
    for name in ["convergence.csv", "control.csv", "summary.json"] {
        assert!(a.join(name).is_file(), "{name}");
    }
    let conv = fs::read_to_string(a.join("convergence.csv")).unwrap();
    let lines: Vec<&str> = conv.lines().collect();
    assert_eq!(lines[0], CONVERGENCE_HEADER);
    assert_eq!(lines.len(), 1 + 3);
    let control = fs::read_to_string(a.join("control.csv")).unwrap();
    assert_eq!(control.lines().next(), Some(CONTROL_HEADER));
    assert_eq!(control.lines().count(), 1 + 301);
    for name in ["convergence.csv", "control.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["final_k"], 5);
    assert_eq!(summary["records"].as_array().unwrap().len(), 4);
    assert!(summary["final_cost"].as_f64().unwrap().is_finite());
}

#[test]
fn dry_run_echoes_the_normalized_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model":"sit","schedule":{"k_max":26},"seed":1}"#);
    let out = dir.path().join("never");
    let o = solve(
        &cfg,
        &[
            "--dry-run",
            "--samples",
            "10",
            "--seed",
            "4",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    assert!(!out.exists());
    let echoed = String::from_utf8(o.stdout).unwrap();
    let c = parse_config_str(&echoed, "stdout").unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.schedule.k_max(), 10);
    assert_eq!(c.solver.grid, 900);
    assert_eq!(c.to_json().trim(), echoed.trim());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = solve(&dir.path().join("absent.json"), &[]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = write_config(
        dir.path(),
        r#"{"model":"sit","schedule":{"k_max":3},"u_min":5,"u_max":1}"#,
    );
    let o = solve(&bad, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("u_max"));

    // e^{1000} overflows during the first forward sweep
    let unstable = write_config(
        dir.path(),
        r#"{"model":"lq_toy","params":{"x0":1},"distributions":[{"name":"a","law":"point","value":1000}],"schedule":{"k_max":2},"grid":1000}"#,
    );
    assert_eq!(solve(&unstable, &[]).status.code(), Some(2));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), r#"{"model":"lq_toy","schedule":{"k_max":2},"grid":10}"#);
    let nested = blocker.join("out");
    assert_eq!(solve(&cfg, &["--out", nested.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn plotscript_references_the_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["plotscript", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let script = fs::read_to_string(dir.path().join("plot.gp")).unwrap();
    assert!(script.contains("convergence.csv") && script.contains("control.csv"));
}
