// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lrdo"));
    c.env("SOURCE_DATE_EPOCH", "1700000000").env_remove("LRDO_THREADS");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL: &str = "[instance]\nd = 40\nn = 100\nn_tst = 30\nr = 3\nseed = 2\n[plan]\ntrials = 10\n";

#[test]
fn zero_target_predicts_zero_risk() {
    let dir = tempfile::tempdir().unwrap();
    let mut beta = String::from("40,2\n");
    for _ in 0..40 {
        beta.push_str("0,0\n");
    }
    write(dir.path(), "beta.csv", &beta);
    let cfg = write(dir.path(), "z.toml", &format!("{SMALL}\n").replace("seed = 2\n", "seed = 2\nbeta_path = \"beta.csv\"\n"));
    let v = json_of(&run(&["predict", "--config", &cfg]));
    assert_eq!(v["payload"]["main"]["total"].as_f64(), Some(0.0));
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("out.json");
    for text in ["[instance\nd = 3", "[instance]\nd = \"many\"\n", "[instance]\nwidth = 3\n", "[plan]\ntrials = 0\n"] {
        let cfg = write(dir.path(), "bad.toml", text);
        let out = run(&["predict", "--config", &cfg, "--out", out_path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(out.stdout.is_empty());
        assert!(!out_path.exists());
    }
    assert_eq!(run(&["predict", "--threads", "zero"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn rank_gap_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gap.toml", "[instance]\nd = 40\nn = 42\nr = 3\n");
    let out = run(&["predict", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank gap"));
}

#[test]
fn golden_config_reruns_byte_identically() {
    let cfg = configs().join("golden_sweep.toml");
    let cfg = cfg.to_str().unwrap();
    let a = run(&["predict", "--config", cfg, "--format", "json"]);
    let b = run(&["predict", "--config", cfg, "--format", "json"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn single_trial_reports_missing_standard_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let out = run(&["simulate", "--config", &cfg, "--trials", "1", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[7], "NA");
    assert_ne!(row[6], "NA");
}

#[test]
fn seed_changes_simulation_but_not_theory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let a = json_of(&run(&["simulate", "--config", &cfg, "--seed", "1"]));
    let b = json_of(&run(&["simulate", "--config", &cfg, "--seed", "2"]));
    assert_eq!(a["payload"]["theory"], b["payload"]["theory"]);
    assert_ne!(a["payload"]["empirical"]["mean"], b["payload"]["empirical"]["mean"]);
    assert_eq!(b["config"]["plan"]["master_seed"], 2);
}

#[test]
fn desk_simulation_is_within_three_percent() {
    let cfg = configs().join("desk_simulate.toml");
    let v = json_of(&run(&["simulate", "--config", cfg.to_str().unwrap()]));
    let rel = v["payload"]["rel_dev"].as_f64().unwrap();
    assert!(rel <= 0.03, "{rel}");
}

#[test]
fn sweep_csv_header_is_fixed() {
    let cfg = configs().join("golden_sweep.toml");
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--trials", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "n,c,r,theory_bias,theory_var,theory_total,emp_mean,emp_se,rel_dev");
    assert_eq!(text.lines().count(), 1 + 11);
    assert!(text.lines().skip(1).all(|l| !l.contains("NA")), "{text}");
    let dir = tempfile::tempdir().unwrap();
    let gap = write(dir.path(), "g.toml", "[instance]\nd = 40\nr = 3\n[grid]\nn_values = [20, 41, 80]\n");
    let out = run(&["sweep", "--config", &gap, "--trials", "3", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(2).unwrap().starts_with("41,") && text.lines().nth(2).unwrap().ends_with("NA,NA,NA,NA,NA,NA"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped"));
}

#[test]
fn mp_reports_support_endpoints() {
    let cfg = configs().join("mp.toml");
    let v = json_of(&run(&["mp", "--config", cfg.to_str().unwrap()]));
    let s = &v["payload"]["support"];
    assert!((s[0].as_f64().unwrap() - 0.25).abs() < 1e-15);
    assert!((s[1].as_f64().unwrap() - 2.25).abs() < 1e-15);
    assert!((v["payload"]["total_mass"].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert!(v["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("T4")));
}

#[test]
fn rmt_check_lists_the_under_parameterized_lemmas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "r.toml", "[instance]\nd = 100\nn = 200\nr = 3\nseed = 4\n[plan]\ntrials = 150\nmaster_seed = 3\n");
    let out = run(&["rmt-check", "--config", &cfg, "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["HH", "Z", "QQ", "QQ_inv", "KK", "KA", "H1", "W_norm"]);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let max_z: f64 = f[2].parse().unwrap();
        assert!(max_z.is_finite(), "{line}");
    }
}

#[test]
fn thread_flag_overrides_environment_and_keeps_output() {
    let cfg = configs().join("golden_sweep.toml");
    let cfg = cfg.to_str().unwrap();
    let one = run(&["sweep", "--config", cfg, "--trials", "5", "--threads", "1"]);
    let env = bin().args(["sweep", "--config", cfg, "--trials", "5"]).env("LRDO_THREADS", "3").output().unwrap();
    let bad_env_flag_wins = bin().args(["sweep", "--config", cfg, "--trials", "5", "--threads", "2"]).env("LRDO_THREADS", "bogus").output().unwrap();
    assert!(one.status.success() && env.status.success());
    assert_eq!(one.stdout, env.stdout);
    assert_eq!(bad_env_flag_wins.stdout, one.stdout);
    let bad_env = bin().args(["predict"]).env("LRDO_THREADS", "bogus").output().unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let path = dir.path().join("res.json");
    let out = run(&["predict", "--config", &cfg, "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["command"], "predict");
    assert_eq!(v["timestamp"], 1_700_000_000u64);
}

#[test]
fn ingest_reports_principal_components() {
    let dir = tempfile::tempdir().unwrap();
    let (d, n) = (20, 50);
    let mut text = format!("{d},{n}\n");
    for i in 0..d {
        let row: Vec<String> = (0..n).map(|j| format!("{}", ((i + 1) * (j % 7)) as f64 + if i == j % d { 3.0 } else { 0.0 })).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write(dir.path(), "x.csv", &text);
    let cfg = write(dir.path(), "i.toml", "[instance]\nr = 2\n[data]\npath = \"x.csv\"\n");
    let out = run(&["ingest", "--config", &cfg, "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "index,sigma");
    assert_eq!(text.lines().count(), 3);
    let missing = write(dir.path(), "m.toml", "[instance]\nr = 2\n[data]\npath = \"nope.csv\"\n");
    assert_ne!(run(&["ingest", "--config", &missing]).status.code(), Some(0));
}

#[test]
fn transfer_prediction_is_reported_with_its_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    let mut beta = String::from("40,40\n");
    for i in 0..40 {
        let row: Vec<String> = (0..40).map(|j| if i == j { "1.5".into() } else { "0".into() }).collect();
        beta.push_str(&row.join(","));
        beta.push('\n');
    }
    write(dir.path(), "bt.csv", &beta);
    let cfg = write(dir.path(), "t.toml", &format!("{SMALL}[test]\nbeta_tst_path = \"bt.csv\"\n"));
    let v = json_of(&run(&["predict", "--config", &cfg]));
    assert_eq!(v["payload"]["transfer"]["coefficient"], "plus_train_noise");
    assert!(v["payload"]["transfer"]["total"].as_f64().unwrap() > v["payload"]["main"]["total"].as_f64().unwrap());
    assert!(v["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("cross term")));
}
