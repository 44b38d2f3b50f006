use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_cmdp-lab");

fn small_config() -> Value {
    json!({
        "algorithm": "kcfd",
        "env": {
            "layer_sizes": [1, 2, 2],
            "n_actions": 2,
            "n_contexts": 3,
            "context_dim": 2,
            "seed": 7,
            "reward_family": {"kind": "linear_clipped"},
            "dynamics_family": "context_free_random",
            "reachability_floor": 0.2,
            "noise": {"kind": "exact"},
            "known_dynamics": true
        },
        "learner": {"eps": 0.3, "delta": 0.1, "loss": "l1", "b": 0.5, "constant_scale": 0.01, "episode_cap": 200000},
        "n_seeds": 2,
        "master_seed": 11
    })
}

fn write_json(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path
}

fn cmd(args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("CMDP_LAB_OUT");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

#[test]
fn malformed_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"algorithm": "kcfd", "env": "#).unwrap();
    let out = run(&mut cmd(&["run", "--config", path.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let mut cfg = small_config();
    cfg["surprise"] = json!(1);
    let path = write_json(dir.path(), "unknown.json", &cfg);
    let out = run(&mut cmd(&["run", "--config", path.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_json_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "cfg.json", &small_config());
    let out_dir = dir.path().join("out");
    let out = run(&mut cmd(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "cmdp-lab/1");
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(report["passed"], true);
}

#[test]
fn env_var_sets_output_and_csv_format_works() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "cfg.json", &small_config());
    let out_dir = dir.path().join("from-env");
    let out = run(cmd(&["run", "--config", cfg.to_str().unwrap(), "--format", "csv"]).env("CMDP_LAB_OUT", &out_dir));
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("schema,algorithm,seed"));
    assert_eq!(lines.filter(|l| l.starts_with("cmdp-lab/1,kcfd,")).count(), 2);
}

#[test]
fn empty_sweep_grid_exits_2() {
    let dir = TempDir::new().unwrap();
    let sweep = json!({"base": small_config(), "param": "learner.eps", "values": []});
    let path = write_json(dir.path(), "sweep.json", &sweep);
    let out = run(&mut cmd(&["sweep", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_csv() {
    let dir = TempDir::new().unwrap();
    let mut base = small_config();
    base["n_seeds"] = json!(1);
    let sweep = json!({"base": base, "param": "learner.eps", "values": [0.4, 0.3]});
    let path = write_json(dir.path(), "sweep.json", &sweep);
    let out = run(&mut cmd(&["sweep", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("schema,learner.eps,episodes_used,suboptimality"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn generate_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "cfg.json", &small_config());
    let out = run(&mut cmd(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0));
    let file = std::fs::File::open(dir.path().join("cmdp.json")).unwrap();
    let cmdp = cmdp_lab::schema::load_cmdp(file).unwrap();
    assert_eq!(cmdp.finite_contexts().unwrap().0.len(), 3);
    assert!(cmdp.context_free_dynamics());
}

#[test]
fn verify_passes() {
    let dir = TempDir::new().unwrap();
    let out = run(&mut cmd(&["verify", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 6);
    assert!(dir.path().join("verify.json").exists());
}
