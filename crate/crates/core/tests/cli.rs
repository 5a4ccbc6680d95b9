// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use saelab_core::experiment::{ExperimentConfig, SEED_ENV};

fn saelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saelab"))
        .args(args)
        .env_remove(SEED_ENV)
        .output()
        .expect("spawn saelab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn bad_flags_and_unknown_config_keys_exit_2() {
    let o = saelab(&["simulate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_dayz": 10}"#).unwrap();
    let out = dir.path().join("run");
    let o = saelab(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("num_dayz"));

    let o = saelab(&["simulate", "--smoke", "--jobs", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn init_config_round_trips() {
    for smoke in [false, true] {
        let args: &[&str] = if smoke { &["init-config", "--smoke"] } else { &["init-config"] };
        let o = saelab(args);
        assert!(o.status.success());
        let cfg = ExperimentConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
        let expect = if smoke { ExperimentConfig::smoke() } else { ExperimentConfig::default() };
        assert_eq!(cfg, expect);
    }
}

#[test]
fn simulate_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert!(saelab(&["simulate", "--smoke", "--out", out]).status.success());
    let before = fs::read(Path::new(out).join("world/news.jsonl")).unwrap();

    let o = saelab(&["simulate", "--smoke", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));

    assert!(saelab(&["simulate", "--smoke", "--force", "--out", out]).status.success());
    assert_eq!(fs::read(Path::new(out).join("world/news.jsonl")).unwrap(), before);
}

#[test]
fn pipeline_without_a_world_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = saelab(&["pipeline", "--smoke", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--simulate"));
}

#[test]
fn report_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(saelab(&["simulate", "--smoke", "--out", out.to_str().unwrap()]).status.success());
    let o = saelab(&["report", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sharpe_by_k.csv"));
    assert!(out.join("report.md").exists());

    let o = saelab(&["report", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_comes_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(saelab(&["simulate", "--smoke", "--seed", "11", "--out", a.to_str().unwrap()]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_saelab"))
        .args(["simulate", "--smoke", "--out", b.to_str().unwrap()])
        .env(SEED_ENV, "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(saelab(&["simulate", "--smoke", "--seed", "12", "--out", c.to_str().unwrap()]).status.success());

    assert_eq!(manifest(&a)["config"]["seed"], 11);
    assert_eq!(manifest(&a)["seeds"], manifest(&b)["seeds"]);
    let news = |d: &Path| fs::read(d.join("world/news.jsonl")).unwrap();
    assert_eq!(news(&a), news(&b));
    assert_ne!(news(&a), news(&c));
}
