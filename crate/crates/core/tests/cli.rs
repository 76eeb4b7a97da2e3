use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "algorithm": "co_pfl",
  "seed": 0,
  "rounds": 4,
  "clients": 4,
  "data": { "num_classes": 4, "input_dim": 5, "train_bound": 10, "test_bound": 10 },
  "model": { "hidden_dim": 6 }
}"#;

fn copfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copfl"))
        .args(args)
        .env_remove("COPFL_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let o = copfl(&["run", "--config", &cfg, "--set", "seed=7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rounds.csv", "summary.json", "config_resolved.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["final_mean_acc"].is_number());
    assert_eq!(summary["per_client_acc"].as_array().unwrap().len(), 4);
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);

    let csv = fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert!(csv.starts_with("round,client_id,test_acc,train_loss,alpha,gamma_grad,gamma_data,mask_popcount\n"));
    assert!(!csv.contains('\r'));
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
}

#[test]
fn rerun_is_byte_identical_and_resolved_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert!(copfl(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(copfl(&["run", "--config", &cfg, "--jobs", "8", "--out", b.to_str().unwrap()]).status.success());
    let resolved = a.join("config_resolved.json");
    assert!(copfl(&["run", "--config", resolved.to_str().unwrap(), "--out", c.to_str().unwrap()]).status.success());
    let rounds = fs::read(a.join("rounds.csv")).unwrap();
    assert_eq!(rounds, fs::read(b.join("rounds.csv")).unwrap());
    assert_eq!(rounds, fs::read(c.join("rounds.csv")).unwrap());
    assert_eq!(
        read_json(&a.join("summary.json"))["config_hash"],
        read_json(&c.join("summary.json"))["config_hash"]
    );
}

#[test]
fn alpha_columns_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(copfl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let mut reader = csv::Reader::from_path(out.join("rounds.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::<u64, f64>::new();
    for row in reader.records() {
        let row = row.unwrap();
        *sums.entry(row[0].parse().unwrap()).or_default() += row[4].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 4);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));
}

#[test]
fn missing_config_exits_2_with_error_json() {
    let o = copfl(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("/nonexistent/cfg.json"));
}

#[test]
fn bad_values_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = copfl(&["validate", "--config", &cfg, "--set", "gamma=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma ∈ [0,1]"));

    let o = copfl(&["validate", "--config", &cfg, "--set", "gama=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));

    let o = copfl(&["validate", "--config", &cfg]);
    assert!(o.status.success());
    let resolved: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(resolved["batch_size"], 32);
}

#[test]
fn sweep_emits_one_row_per_point_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = copfl(&[
        "sweep", "--config", &cfg, "--grid", "p=0.05,0.25", "--grid", "gamma=0.3,0.5",
        "--seeds", "1,2", "--jobs", "4", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("p,gamma,seed,final_mean_acc,final_std_acc,status"));
    assert_eq!(lines.filter(|l| l.ends_with(",ok")).count(), 8);
    let heat = fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 4);
    assert!(heat.lines().skip(1).all(|l| l.ends_with(",2")));
}

#[test]
fn sweep_records_bad_points_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = copfl(&[
        "sweep", "--config", &cfg, "--grid", "gamma=0.5,1.5", "--seeds", "0", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert!(rows[0].ends_with(",ok"));
    assert!(rows[1].starts_with("1.5,0,nan,nan,"));
}

#[test]
fn ablate_runs_four_variants_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("ablate");
    let o = copfl(&["ablate", "--config", &cfg, "--seeds", "3,4", "--jobs", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    let uniform: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[0] == "uniform").collect();
    assert_eq!(uniform.len(), 2);

    // The both-off variant must be uniform-weight CO-PFL.
    let run_dir = out.join("runs").join("uniform_seed3");
    let mut reader = csv::Reader::from_path(run_dir.join("rounds.csv")).unwrap();
    for row in reader.records() {
        assert_eq!(&row.unwrap()[4], "0.25");
    }

    let o = copfl(&["ablate", "--config", &cfg, "--set", "algorithm=fedavg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seeds_flag_writes_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("multi");
    assert!(copfl(&["run", "--config", &cfg, "--seeds", "5,6", "--out", out.to_str().unwrap()]).status.success());
    assert!(out.join("seed_5/summary.json").exists());
    assert!(out.join("seed_6/summary.json").exists());
}

#[test]
fn output_root_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_copfl"))
        .args(["run", "--config", &cfg])
        .env("COPFL_OUT", &root)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.join("rounds.csv").exists());
}
