use std::path::Path;
use std::process::{Command, Output};

use gte::io::read_dataset;
use gte_core::baselines::ht_dim;
use gte_core::simulator::{simulate, DgpConfig};

fn gte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gte")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON output")
}

const FIXTURE: &str = "query_id,slot,item_id,viewer_v,c1,c2,w,exposed,y
0,0,1,0.5,1,0.1,1,1,2
1,0,1,0.5,1,0.1,1,1,2
2,0,2,0.5,0,0.3,0,1,1
3,0,2,0.5,0,0.3,0,1,1
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn estimate_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", FIXTURE);
    let r = json(&gte(&["estimate", "--in", &data, "--estimator", "ht-dim", "--q", "0.5"]));
    assert_eq!(r["tau_hat"], 1.0);
    assert_eq!(r["estimator"], "HT-DIM");
    let r = json(&gte(&["estimate", "--in", &data, "--estimator", "ha-dim,ipw"]));
    assert_eq!(r[0]["tau_hat"], 1.0);
    assert_eq!(r[1]["tau_hat"], 1.0);
}

#[test]
fn simulate_then_estimate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv").display().to_string();
    let out = gte(&["simulate", "--k", "3", "--queries", "400", "--items", "80", "--dgp-seed", "9", "--out", &csv]);
    assert!(out.status.success());
    let cfg = DgpConfig { set_size: 3, n_queries: 400, n_items: 80, seed: 9, ..DgpConfig::default() };
    let direct = simulate(&cfg).unwrap();
    let loaded = read_dataset(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(loaded.observations(), direct.observations());
    let r = json(&gte(&["estimate", "--in", &csv, "--estimator", "ht-dim"]));
    assert_eq!(r["tau_hat"].as_f64().unwrap().to_bits(), ht_dim(&direct, 0.5).unwrap().tau_hat.to_bits());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "o.cfg", "# oracle\ndgp.k = 8\noracle.n = 2000\n");
    let r = json(&gte(&["oracle", "--config", &cfg]));
    assert_eq!(r["k"], 8);
    assert_eq!(r["n"], 2000);
    let r = json(&gte(&["oracle", "--config", &cfg, "--k", "2"]));
    assert_eq!(r["k"], 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "dgp.kay = 3\n");
    assert_eq!(gte(&["oracle", "--config", &bad]).status.code(), Some(2));
    assert_eq!(gte(&["oracle", "--treat-prob", "1.5"]).status.code(), Some(2));
    assert_eq!(gte(&["frobnicate"]).status.code(), Some(2));
    let data = write(dir.path(), "d.csv", FIXTURE);
    assert_eq!(gte(&["estimate", "--in", &data, "--estimator", "dim"]).status.code(), Some(2));
    // Hájek needs both arms: a runtime failure, not a usage error
    let one_arm = write(dir.path(), "one.csv", &FIXTURE.lines().take(3).collect::<Vec<_>>().join("\n"));
    assert_eq!(gte(&["estimate", "--in", &one_arm, "--estimator", "ha-dim"]).status.code(), Some(1));
}

#[test]
fn check_passes_and_catches_injected_fault() {
    let ok = gte(&["check", "--orthogonality-draws", "2000"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = gte(&["check", "--orthogonality-draws", "2000", "--inject-fault", "grad-mu"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8(bad.stdout).unwrap();
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].contains("grad_mu"));
}

#[test]
fn montecarlo_table_and_worker_independence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, tag: &str| {
        let csv = dir.path().join(format!("t{tag}.csv"));
        let out = gte(&[
            "montecarlo", "--k", "3", "--queries", "300", "--items", "60", "--replications", "4",
            "--estimators", "ht-dim,ha-dim,ipw", "--oracle-n", "2000", "--threads", threads,
            "--csv", csv.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (out.stdout, std::fs::read_to_string(csv).unwrap())
    };
    let (json1, csv1) = run("1", "a");
    let (json3, csv3) = run("3", "b");
    assert_eq!(json1, json3);
    assert_eq!(csv1, csv3);
    assert_eq!(csv1.lines().next().unwrap(), "estimator,k,bias_mean,bias_se,mc_sd,est_se_mean,coverage");
    assert_eq!(csv1.lines().count(), 4);
}
