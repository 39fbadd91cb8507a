//! End-to-end checks of the `netfx` binary: exit codes, output formats, and
//! byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_netfx")
}

struct TempDir {
    path: PathBuf,
}

impl TempDir {
    fn new(tag: &str) -> Self {
        let path = std::env::temp_dir().join(format!(
            "netfx-cli-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&path).unwrap();
        Self { path }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should run")
}

fn write_toy_csv(path: &Path) {
    std::fs::write(
        path,
        "cluster_id,unit_id,y,a,x1\n\
         c1,1,1.5,0,0.5\n\
         c1,2,2.5,1,-0.5\n\
         c2,1,0.5,1,1.0\n\
         c2,2,3.0,0,0.25\n\
         c3,1,1.0,0,0.75\n\
         c3,2,2.0,1,-0.25\n\
         c4,1,0.25,1,0.1\n\
         c4,2,1.25,0,0.9\n",
    )
    .unwrap();
}

#[test]
fn estimate_ipw_smoke() {
    let dir = TempDir::new("ipw");
    let data = dir.file("data.csv");
    write_toy_csv(&data);
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "DE", "alpha": 0.5},
            "propensity": {"kind": "known", "prob": 0.5},
            "estimator": {"kind": "ipw"}
        }"#,
    )
    .unwrap();
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["tau"].is_number());
    assert!(json["se"].is_number());
    assert_eq!(json["n"], 4);
}

#[test]
fn estimate_ie_identical_policies_is_zero() {
    let dir = TempDir::new("ie-zero");
    let data = dir.file("data.csv");
    write_toy_csv(&data);
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "IE", "alpha": 0.6, "alpha_prime": 0.6},
            "propensity": {"kind": "known", "prob": 0.5},
            "outcome": {"kind": "zero"}
        }"#,
    )
    .unwrap();
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["tau"].as_f64().unwrap(), 0.0);
}

#[test]
fn config_with_absent_type_exits_2_naming_it() {
    let dir = TempDir::new("absent-type");
    let data = dir.file("data.csv");
    write_toy_csv(&data);
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "DE", "alpha": {"1": 0.4, "7": 0.4}},
            "propensity": {"kind": "known", "prob": 0.5}
        }"#,
    )
    .unwrap();
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("type 7"), "stderr: {stderr}");
}

#[test]
fn sweep_row_counts() {
    let dir = TempDir::new("sweep");
    let data = dir.file("data.csv");
    write_toy_csv(&data);
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "DE", "alpha": 0.5},
            "propensity": {"kind": "known", "prob": 0.5},
            "estimator": {"kind": "ipw"}
        }"#,
    )
    .unwrap();
    let out_csv = dir.file("sweep.csv");
    let out = run(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--grid",
        "0.1:0.9:9",
        "--out",
        out_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines.len(), 10); // header + 9 grid points
    assert!(lines[0].starts_with("alpha_1,tau,se,ci_lo,ci_hi,significant"));

    // grid outside (0, 1) is rejected
    let out = run(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--grid",
        "0.0:0.9:5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn two_type_sweep_is_cartesian() {
    let dir = TempDir::new("sweep2");
    let data = dir.file("data.csv");
    // two types by size: three 2-unit clusters and three 3-unit clusters
    let mut csv = String::from("cluster_id,unit_id,y,a,x1\n");
    for i in 0..3 {
        csv.push_str(&format!("s{i},1,1.0,0,0.1\ns{i},2,2.0,1,0.2\n"));
    }
    for i in 0..3 {
        csv.push_str(&format!("b{i},1,1.0,1,0.1\nb{i},2,2.0,0,0.2\nb{i},3,1.5,1,0.3\n"));
    }
    std::fs::write(&data, csv).unwrap();
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "IE", "alpha": 0.5, "alpha_prime": {"1": 0.628, "2": 0.449}},
            "propensity": {"kind": "known", "prob": {"1": 0.628, "2": 0.449}},
            "estimator": {"kind": "ipw"}
        }"#,
    )
    .unwrap();
    let out = run(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--grid",
        "0.1:0.9:19",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines.len(), 362); // header + 19 x 19
    assert!(lines[0].starts_with("alpha_1,alpha_2,"));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = TempDir::new("sim");
    let out1 = dir.file("a.csv");
    let out2 = dir.file("b.csv");
    for out in [&out1, &out2] {
        let run_out = run(&[
            "simulate",
            "--scenario",
            "glmm",
            "--n",
            "50",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(run_out.status.success());
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b);

    let out3 = dir.file("c.csv");
    let run_out = run(&[
        "simulate",
        "--scenario",
        "glmm",
        "--n",
        "50",
        "--seed",
        "8",
        "--out",
        out3.to_str().unwrap(),
    ]);
    assert!(run_out.status.success());
    assert_ne!(a, std::fs::read(&out3).unwrap());
}

#[test]
fn simulated_data_round_trips_through_estimate() {
    let dir = TempDir::new("sim-estimate");
    let data = dir.file("data.csv");
    let out = run(&[
        "simulate",
        "--scenario",
        "noint",
        "--n",
        "400",
        "--seed",
        "3",
        "--p",
        "0.5",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "DE", "alpha": 0.5},
            "propensity": {"kind": "known", "prob": 0.5},
            "outcome": {"kind": "linear_mixed"}
        }"#,
    )
    .unwrap();
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // true direct effect is 3; at N = 400 the estimate lands well inside 4 SE
    let tau = json["tau"].as_f64().unwrap();
    let se = json["se"].as_f64().unwrap();
    assert!((tau - 3.0).abs() < 4.0 * se, "tau {tau}, se {se}");
}

#[test]
fn mc_study_glmm_writes_table_rows() {
    let dir = TempDir::new("mc-glmm");
    let out_csv = dir.file("mc.csv");
    let out = run(&[
        "mc-study",
        "--scenario",
        "glmm",
        "--spec",
        "CO,CP,CT",
        "--reps",
        "2",
        "--n",
        "80",
        "--seed",
        "5",
        "--out",
        out_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(
        lines[0],
        "scenario,estimand,spec,bias,emp_se,mean_se,coverage,reps,failures"
    );
    assert_eq!(lines.len(), 3); // header + DE row + IE row
    assert!(lines[1].contains("\"CO,CP,CT\"") || lines[1].contains("CO,CP,CT"));
}

#[test]
fn mc_study_noint_variance_curve() {
    let out = run(&[
        "mc-study",
        "--scenario",
        "noint",
        "--p",
        "0.5",
        "--alpha-grid",
        "0.3:0.7:3",
        "--reps",
        "5",
        "--n",
        "200",
        "--seed",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines[0], "alpha,mean_tau,bias,emp_var,theory_var,reps");
    assert_eq!(lines.len(), 4);
}

#[test]
fn validate_reports_types_and_rejects_bad_rows() {
    let dir = TempDir::new("validate");
    let data = dir.file("data.csv");
    write_toy_csv(&data);
    let out = run(&["validate", "--data", data.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("4 clusters"));
    assert!(stdout.contains("type 1: size 2"));

    let bad = dir.file("bad.csv");
    std::fs::write(
        &bad,
        "cluster_id,unit_id,y,a,x1\nc1,1,1.0,2,0.5\nc1,2,1.0,0,0.5\n",
    )
    .unwrap();
    let out = run(&["validate", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn mc_study_output_is_byte_reproducible() {
    let dir = TempDir::new("mc-determinism");
    let out1 = dir.file("a.csv");
    let out2 = dir.file("b.csv");
    for out in [&out1, &out2] {
        let run_out = run(&[
            "mc-study",
            "--scenario",
            "noint",
            "--p",
            "0.4",
            "--alpha-grid",
            "0.3:0.7:3",
            "--reps",
            "4",
            "--n",
            "120",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(run_out.status.success());
    }
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn thread_env_var_is_honored() {
    let dir = TempDir::new("threads");
    let data = dir.file("data.csv");
    write_toy_csv(&data);
    let config = dir.file("config.json");
    std::fs::write(
        &config,
        r#"{
            "estimand": {"kind": "DE", "alpha": 0.5},
            "propensity": {"kind": "known", "prob": 0.5},
            "estimator": {"kind": "ipw"}
        }"#,
    )
    .unwrap();
    let single = Command::new(bin())
        .env("NETFX_THREADS", "1")
        .args([
            "estimate",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(single.status.success());
    let multi = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    // estimates are independent of the worker pool size
    assert_eq!(single.stdout, multi.stdout);
}

#[test]
fn unknown_flags_fail_loudly_and_help_lists_commands() {
    let out = run(&["estimate", "--bogus-flag", "x"]);
    assert!(!out.status.success());

    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["estimate", "sweep", "simulate", "mc-study", "validate"] {
        assert!(text.contains(sub), "help is missing `{sub}`");
    }
}
