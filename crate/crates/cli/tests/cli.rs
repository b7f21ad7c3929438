use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smpdefault::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smpdefault"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("smpdefault-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn report(out: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap()
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

#[test]
fn shipped_config_equals_builtin_defaults() {
    let cfg = ExperimentConfig::load(&shipped_config()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn malformed_config_exits_2_with_location() {
    let d = scratch("bad");
    let path = d.join("bad.toml");
    fs::write(&path, "[model]\nhorizon = 1.0\nmu = \"steep\"\n").unwrap();
    let o = run(&["log-utility", "--config", path.to_str().unwrap()], &d);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    fs::write(&path, "[numerics]\nn_pths = 500\n").unwrap();
    let o = run(&["log-utility", "--config", path.to_str().unwrap()], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_pths"));
}

#[test]
fn invalid_override_exits_2() {
    let d = scratch("override");
    let o = run(&["simulate-sde", "--paths", "10"], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerics.n_paths"));
    let o = run(&["simulate-sde", "--steps", "1"], &d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn log_utility_reports_half_at_time_zero() {
    let d = scratch("log");
    let o = run(&["log-utility", "--config", shipped_config().to_str().unwrap(), "--paths", "2000"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&d, "log-utility.json");
    assert_eq!(r["details"]["pi_hat_t0"].as_f64(), Some(0.5));
    assert_eq!(r["subcommand"], "log-utility");
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["verdict"] == "PASS"));
    let curve = fs::read_to_string(d.join("pi_hat_curve.csv")).unwrap();
    assert!(curve.starts_with("knot,t,mean_pi_hat,mean_conditional_theta\n0,0,0.5,1\n"), "{curve}");
    assert!(d.join("timing.json").exists());
}

#[test]
fn simulate_sde_writes_csv_and_honours_seed() {
    let d = scratch("sim");
    let o = run(&["simulate-sde", "--paths", "500", "--steps", "10", "--seed", "7"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&d, "simulate-sde.json");
    assert_eq!(r["seed"], 7);
    assert_eq!(r["config"]["numerics"]["n_steps"], 10);
    let sde = fs::read_to_string(d.join("sde.csv")).unwrap();
    assert!(sde.starts_with("path,knot,t,X,u,H\n"));
    let paths = fs::read_to_string(d.join("paths.csv")).unwrap();
    assert!(paths.starts_with("path,knot,t,dW,W,H,M,lambda_G\n"));
    // 100 paths by default, at least 11 knots each
    assert!(paths.lines().count() > 100 * 11);
}

#[test]
fn suboptimal_control_fails_verify_smp() {
    let d = scratch("subopt");
    let path = d.join("c.toml");
    fs::write(&path, "[run]\ncontrol = { kind = \"constant\", value = 1.0 }\n").unwrap();
    let o = run(&["verify-smp", "--config", path.to_str().unwrap(), "--paths", "1000"], &d);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&d, "verify-smp.json");
    let checks = r["checks"].as_array().unwrap();
    let vi = checks.iter().find(|c| c["name"].as_str().unwrap().starts_with("variational")).unwrap();
    assert_eq!(vi["verdict"], "FAIL");
    // the equivalence principle still holds away from the optimum
    let dd = checks.iter().find(|c| c["name"].as_str().unwrap().starts_with("direction 0")).unwrap();
    assert_eq!(dd["verdict"], "PASS");
}

#[test]
fn linear_bsde_solvers_agree() {
    let d = scratch("linear");
    let path = d.join("c.toml");
    fs::write(
        &path,
        "[model]\nintensity = { kind = \"constant\", value = 0.5 }\n[run]\nbsde = { kind = \"linear\", phi = 0.5, alpha = 0.1, pi = 0.05, mu = -0.4, beta = 0.3, terminal_const = 1.0, terminal_w = 1.0 }\n",
    )
    .unwrap();
    let o = run(&["solve-bsde", "--config", path.to_str().unwrap(), "--paths", "4000"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let csv = fs::read_to_string(d.join("bsde_regression.csv")).unwrap();
    assert!(csv.starts_with("knot,t,mean_Y,mean_Z,mean_K,residual\n"));
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn adjoint_bsde_and_directional_derivative_pass() {
    let d = scratch("adjoint");
    let o = run(&["solve-bsde", "--paths", "2000"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&d, "solve-bsde.json");
    // p_0 S_0 = theta + T exactly for the explicit solver
    assert!((r["details"]["explicit_y0"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    let o = run(&["directional-derivative", "--paths", "2000"], &d);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn selftest_is_byte_reproducible() {
    let d = scratch("selftest");
    let o = run(&["selftest", "--quick"], &d);
    assert!(o.status.code().is_some_and(|c| c <= 1));
    let first = fs::read(d.join("selftest.json")).unwrap();
    let o = run(&["selftest", "--quick"], &d);
    assert!(o.status.code().is_some_and(|c| c <= 1));
    let second = fs::read(d.join("selftest.json")).unwrap();
    assert_eq!(first, second);
    let lines = String::from_utf8_lossy(&o.stdout).lines().filter(|l| l.starts_with("criterion ")).count();
    assert_eq!(lines, 14);
}
