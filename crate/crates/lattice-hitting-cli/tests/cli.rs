use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_lattice-hitting");

const THREE_SITES: &str = r#"{
  "base": {"d": 2, "steps": [[[1,0],0.25],[[-1,0],0.25],[[0,1],0.25],[[0,-1],0.25]]},
  "sites": {"labels": ["A","B","C"], "sigma": [[0,0],[-1,0],[1,1]], "t_values": [1]},
  "tasks": ["exact", "mainthm"]
}"#;

const RUIN: &str = r#"{
  "base": {"d": 1, "steps": [[[1],0.5],[[-1],0.5]]},
  "sites": {"labels": ["a","b"], "sigma": [[0],[1]], "t_values": [5, 10]},
  "tasks": ["oracle", "simulate", "predict"],
  "simulation": {"n_traj": 4000},
  "predict": {"regime": "d1_l2", "var": 1.0}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

#[test]
fn exact_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "three_sites.json", THREE_SITES);
    let out = dir.path().join("out");
    let (code, _, err) = run(&["exact", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--grid", "256"]);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let p = &report["scales"][0]["exact"]["p"];
    let pi = std::f64::consts::PI;
    let p_ac = pi / (-pi * pi + 8.0 * pi - 4.0);
    assert!((p[0][2].as_f64().unwrap() - p_ac).abs() < 1e-3);
    assert!(report.get("runtime_seconds").is_none());
    let decay = std::fs::read_to_string(out.join("decay.csv")).unwrap();
    assert_eq!(decay.lines().next(), Some("t,pair,value,source,se"));
    assert!(decay.lines().any(|l| l.contains(",A->C,") && l.ends_with(",exact,")));
    let matrices = std::fs::read_to_string(out.join("matrices.csv")).unwrap();
    assert!(matrices.starts_with("t,source,matrix,row,col,value\n"));
}

#[test]
fn verify_checks_main_theorem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "three_sites.json", THREE_SITES);
    let out = dir.path().join("out");
    let (code, stdout, _) = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--grid", "256"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("[PASS] criterion 4"), "{stdout}");
    assert!(stdout.contains("max-entry norm of Q"));
}

#[test]
fn simulation_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ruin.json", RUIN);
    let bytes = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let (code, _, err) = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code, 0, "{err}");
        std::fs::read(out.join("report.json")).unwrap()
    };
    let a = bytes("a", "7");
    let b = bytes("b", "7");
    let c = bytes("c", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn verify_runs_oracle_simulation_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ruin.json", RUIN);
    let out = dir.path().join("out");
    let (code, stdout, err) = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code, 0, "{stdout}\n{err}");
    let decay = std::fs::read_to_string(out.join("decay.csv")).unwrap();
    for source in ["exact", "mc", "pred"] {
        assert!(decay.lines().any(|l| l.split(',').nth(3) == Some(source)), "{source}");
    }
    // The L² prediction is exact for the simple walk: 1/(2t).
    let line = decay.lines().find(|l| l.starts_with("1.0000000000000000e1,a->b,") && l.contains(",pred,")).unwrap();
    let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
    assert!((v - 0.05).abs() < 1e-15);
}

#[test]
fn failed_criterion_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let wrong = RUIN.replace("\"var\": 1.0", "\"var\": 3.0").replace("\"simulate\", ", "");
    let cfg = write(dir.path(), "wrong.json", &wrong);
    let out = dir.path().join("out");
    let (code, stdout, _) = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(stdout.contains("[FAIL] criterion 5"));
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let empty = write(dir.path(), "empty.json", &THREE_SITES.replace("[\"exact\", \"mainthm\"]", "[]"));
    assert_eq!(run(&["verify", "--config", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 3);
    let typo = write(dir.path(), "typo.json", &THREE_SITES.replace("\"tasks\"", "\"taks\": [\"exact\"], \"tasks\""));
    assert_eq!(run(&["exact", "--config", typo.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 3);
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["exact", "--config", missing.to_str().unwrap()]).0, 3);
    assert_eq!(run(&["exact", "--bogus"]).0, 3);
    let no_regime = write(dir.path(), "nr.json", THREE_SITES);
    assert_eq!(run(&["predict", "--config", no_regime.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 3);
    assert!(!out.join("report.json").exists());
}

#[test]
fn structure_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let third = 1.0 / 3.0;
    let cfg = serde_json::json!({
        "base": {
            "d": 1,
            "states": ["0-", "00", "0+", "1", "2", "3", "4"],
            "trans": [
                [0, 0, 0, 1, 0, 0, 0],
                [0, 0, 0, 1, 0, 0, 0],
                [0, 0, 0, 1, 0, 0, 0],
                [0, 0, 0, 0, 1, 0, 0],
                [0, 0, 0, 0, 0, 1, 0],
                [0, 0, 0, 0, 0, 0, 1],
                [third, third, third, 0, 0, 0, 0]
            ],
            "jump": [[-1], [0], [1], [0], [0], [0], [0]]
        },
        "sites": {"labels": ["a", "b"], "sigma": [[0], [1]], "t_values": [1]},
        "tasks": ["structure"]
    });
    let path = write(dir.path(), "mono.json", &cfg.to_string());
    let out = dir.path().join("out");
    let (code, stdout, err) = run(&["structure", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("[PASS] criterion 8"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["structure"]["report"]["period"], 5);
    assert_eq!(report["structure"]["report"]["coloring"]["kind"], "monochromatic");
}
