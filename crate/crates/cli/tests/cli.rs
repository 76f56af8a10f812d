use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedplt::io::{load_instance, save_instance};
use fedplt::{ModelVector, NonsmoothSpec, ProblemInstance};
use serde_json::Value;

fn fedplt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedplt"))
        .args(args)
        .env_remove("FEDPLT_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let o = fedplt(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates an instance under `dir/name` and returns the instance path.
fn generate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["generate", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("instance.fedplt")
}

#[test]
fn generate_defaults_to_the_desk_instance() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a", &[]);
    let b = generate(dir.path(), "b", &[]);
    let p = load_instance(&a).unwrap();
    assert_eq!((p.agents.len(), p.n), (10, 5));
    assert!(p.sample_counts().iter().all(|&q| q == 50));
    assert_eq!(p.require_bounds().unwrap().lambda_lo, 0.5);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let m = json(&dir.path().join("a/manifest.json"));
    assert_eq!(m["subcommand"], "generate");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["params"]["agents"], 10);
    assert_eq!(m["params"]["reg"], "l2");
    assert_eq!(m["seed"], 0);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let inst = generate(dir.path(), "g", &[]);
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["generate", "--agents", "0", "--out", s(&out)],
        vec!["run", s(&inst), "--solver", "noisy", "--out", s(&out)],
        vec!["run", s(&inst), "--participation", "bernoulli:0", "--out", s(&out)],
        vec!["run", s(&inst), "--participation", "subset:11", "--out", s(&out)],
        vec!["sweep", s(&inst), "--axis", "epochs", "--values", "1", "--out", s(&out)],
        vec![
            "privacy", "--L", "1", "--tau", "1", "--gamma", "0.1", "--lambda-order", "1", "--rounds", "10", "--ne", "5",
            "--q", "10", "--lambda-lo", "1", "--out", s(&out),
        ],
        vec!["run", "--bogus-flag"],
    ];
    for args in cases {
        let o = fedplt(&args);
        assert_eq!(code(&o), 2, "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(!err.trim().is_empty());
    }
}

#[test]
fn tune_reports_both_spectral_columns() {
    let dir = tempfile::tempdir().unwrap();
    let inst = generate(dir.path(), "g", &[]);
    let out = dir.path().join("tune");
    let stdout = ok(&["tune", s(&inst), "--out", s(&out)]);
    assert!(stdout.contains("best: rho 1 "));
    let table = fs::read_to_string(out.join("tuning.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"spectral_radius") && header.contains(&"spectral_norm"));
    let stable = header.iter().position(|h| *h == "stable").unwrap();
    assert!(table.lines().skip(1).any(|l| l.split(',').nth(stable) == Some("true")));
    assert!(json(&out.join("best.json"))["stable"].as_bool().unwrap());
}

#[test]
fn tune_without_a_stable_point_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // weak regularization makes kappa large, and one accelerated epoch then expands
    let inst = generate(dir.path(), "g", &["--reg-weight", "0.001"]);
    let out = dir.path().join("tune");
    let o = fedplt(&["tune", s(&inst), "--solver", "agd", "--ne-grid", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("tuning.csv").exists() && out.join("manifest.json").exists());
    assert!(!out.join("best.json").exists());
}

#[test]
fn exact_run_on_the_quadratic_pair_reaches_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("pair.fedplt");
    let p = ProblemInstance::quadratic(
        vec![ModelVector::new(vec![1.0 / 3.0]), ModelVector::new(vec![-1.0])],
        vec![1.0, 3.0],
        NonsmoothSpec::Zero,
    )
    .unwrap();
    save_instance(&p, &inst).unwrap();
    let out = dir.path().join("run");
    ok(&["run", s(&inst), "--solver", "exact", "--rounds", "60", "--out", s(&out)]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["reached"], true);
    assert_eq!(summary["rounds"], 60);
    let y = json(&out.join("final.json"))["y"][0].as_f64().unwrap();
    assert!((y + 2.0 / 3.0).abs() < 1e-6, "{y}");
    let lines = fs::read_to_string(out.join("trajectory.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 61);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["resolved"]["config"]["rounds"], 60);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn runs_are_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let inst = generate(dir.path(), "g", &[]);
    let mut trajectories = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("run{workers}"));
        let o = Command::new(env!("CARGO_BIN_EXE_fedplt"))
            .args([
                "run", s(&inst), "--solver", "noisy", "--tau", "0.05", "--participation", "bernoulli:0.5", "--rounds",
                "15", "--seed", "3", "--out", s(&out),
            ])
            .env("FEDPLT_WORKERS", workers)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        trajectories.push(fs::read(out.join("trajectory.jsonl")).unwrap());
    }
    assert_eq!(trajectories[0], trajectories[1]);

    let o = Command::new(env!("CARGO_BIN_EXE_fedplt"))
        .args(["run", s(&inst), "--out", s(&dir.path().join("bad"))])
        .env("FEDPLT_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_runs_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    // without convexity bounds only step positivity is checked
    let inst = generate(dir.path(), "g", &["--reg", "nonconvex"]);
    let o = fedplt(&["run", s(&inst), "--gamma", "1e200", "--rounds", "5", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweeps_emit_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let inst = generate(dir.path(), "g", &[]);
    let out = dir.path().join("rho");
    let stdout = ok(&[
        "sweep", s(&inst), "--axis", "rho", "--values", "0.1,1,10", "--seeds", "2", "--rounds", "300", "--out", s(&out),
    ]);
    assert_eq!(stdout.lines().count(), 4);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table, stdout);

    let out = dir.path().join("ne");
    ok(&[
        "sweep", s(&inst), "--axis", "ne", "--values", "1,2,5,8,10,20", "--seeds", "2", "--rounds", "200", "--format",
        "json", "--out", s(&out),
    ]);
    let rows = json(&out.join("table.json"));
    assert_eq!(rows.as_array().unwrap().len(), 6);
    assert_eq!(json(&out.join("manifest.json"))["resolved"]["spec"]["axis"], "ne");
}

#[test]
fn privacy_reproduces_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(&[
        "privacy", "--L", "1", "--tau", "1", "--gamma", "0.1", "--lambda-order", "2", "--rounds", "10", "--ne", "5", "--q",
        "10", "--lambda-lo", "1", "--delta", "0.36787944117144233", "--out", s(&out),
    ]);
    let r = json(&out.join("privacy.json"));
    let eps = r["report"]["eps_worst"].as_f64().unwrap();
    let pp = fedplt::privacy::PrivacyParams {
        sensitivity: 1.0,
        tau_sq: 1.0,
        gamma: 0.1,
        renyi_order: 2.0,
        q: vec![10],
        lambda_lo: 1.0,
    };
    assert_eq!(eps, fedplt::privacy::rdp_epsilon_worst(&pp, 10, 5).unwrap());
    let oracle = 2.0 / 100.0 * (1.0 - (-2.5f64).exp());
    assert!((eps / oracle - 1.0).abs() < 1e-15);
    assert!((eps - 0.018358).abs() < 1e-6);
    let adp = r["report"]["adp_worst"][0][1].as_f64().unwrap();
    assert!((adp - (eps + 1.0)).abs() < 1e-12);

    let out = dir.path().join("zero");
    ok(&[
        "privacy", "--L", "1", "--tau", "1", "--gamma", "0.1", "--lambda-order", "2", "--rounds", "0", "--ne", "5", "--q",
        "10,20", "--lambda-lo", "1", "--out", s(&out),
    ]);
    let r = json(&out.join("privacy.json"));
    assert!(r["report"]["rows"].as_array().unwrap().iter().all(|row| row["eps_rdp"] == 0.0));
}

#[test]
fn privacy_warns_about_large_steps_on_an_instance() {
    let dir = tempfile::tempdir().unwrap();
    let inst = generate(dir.path(), "g", &[]);
    let out = dir.path().join("p");
    let o = fedplt(&[
        "privacy", s(&inst), "--L", "1", "--tau", "1", "--gamma", "5", "--lambda-order", "2", "--rounds", "10", "--ne", "5",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let r = json(&out.join("privacy.json"));
    assert_eq!(r["warnings"].as_array().unwrap().len(), 1);
    assert_eq!(r["params"]["q"].as_array().unwrap().len(), 10);

    let o = fedplt(&[
        "privacy", s(&inst), "--L", "1", "--tau", "1", "--gamma", "0.1", "--lambda-order", "2", "--rounds", "10", "--ne",
        "5", "--q", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2);
}
