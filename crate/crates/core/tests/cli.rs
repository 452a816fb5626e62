mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saclt::cli::{PoissonReport, TheoryFile};
use saclt::config::ExperimentConfig;
use saclt::harness::{CltReport, ConditionSummary};
use serde_json::json;
use tempfile::TempDir;

use common::{preset, preset_path};

fn saclt(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saclt"))
        .arg(args[0])
        .arg("--config")
        .arg(config)
        .args(&args[1..])
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.path().join(format!("{name}.json"));
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn write_json(dir: &TempDir, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.path().join(format!("{name}.json"));
    std::fs::write(&path, value.to_string()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small(name: &str, replicates: usize, horizon: u64) -> ExperimentConfig {
    let mut cfg = preset(name);
    cfg.ensemble.replicates = replicates;
    cfg.ensemble.horizon = horizon;
    cfg
}

#[test]
fn conditions_fast_preset_passes_for_raw_theorem() {
    let o = saclt(&["conditions"], &preset_path("scalar_fast"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("fast (C2b)"));
    assert!(text.contains("aver2 false"));
}

#[test]
fn conditions_slow_preset_passes_for_averaging() {
    let dir = TempDir::new().unwrap();
    let mut cfg = preset("scalar_slow");
    cfg.theorem = saclt::harness::Theorem::Averaged;
    let path = write_config(&dir, "slow", &cfg);
    let o = saclt(
        &["conditions", "--out", dir.path().to_str().unwrap()],
        &path,
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("aver2 true"));
    let summary: ConditionSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("conditions.json")).unwrap())
            .unwrap();
    assert!(summary.aver2 && summary.pass);
}

#[test]
fn conditions_fail_below_the_fast_rate_bound() {
    let dir = TempDir::new().unwrap();
    let mut cfg = preset("scalar_fast");
    cfg.schedule = saclt::StepSchedule::new(0.3, 1.0, 0).unwrap();
    let path = write_config(&dir, "bad", &cfg);
    let o = saclt(&["conditions"], &path);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("invalid"));
}

#[test]
fn averaging_with_harmonic_steps_fails_conditions() {
    let dir = TempDir::new().unwrap();
    let mut cfg = preset("scalar_fast");
    cfg.theorem = saclt::harness::Theorem::Averaged;
    let path = write_config(&dir, "fast_avg", &cfg);
    assert_eq!(saclt(&["conditions"], &path).status.code(), Some(1));
}

fn theory(config: &Path) -> TheoryFile {
    let o = saclt(&["lyapunov"], config);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn lyapunov_closed_forms() {
    let t = theory(&preset_path("scalar_slow"));
    assert!((t.targets[0].v_raw.as_ref().unwrap()[0][0] - 2.0).abs() < 1e-12);
    assert!((t.targets[0].v_avg[0][0] - 4.0).abs() < 1e-12);
    let t = theory(&preset_path("scalar_fast"));
    assert!((t.targets[0].v_raw.as_ref().unwrap()[0][0] - 4.0).abs() < 1e-12);

    let dir = TempDir::new().unwrap();
    let mut cfg = preset("double_well");
    cfg.problem = saclt::config::ProblemSpec::DoubleWell {
        noise_variance: 1.0,
    };
    let t = theory(&write_config(&dir, "dw", &cfg));
    let plus = t.targets.iter().find(|t| t.root[0] > 0.0).unwrap();
    assert!((plus.jacobian[0][0] + 2.0).abs() < 1e-12);
    assert!((plus.v_raw.as_ref().unwrap()[0][0] - 0.25).abs() < 1e-12);
}

#[test]
fn simulate_writes_deterministic_csvs() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small("scalar_slow", 1, 1000);
    cfg.ensemble.checkpoints = Some(vec![10, 100, 1000]);
    let path = write_config(&dir, "sim", &cfg);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = saclt(&["simulate", "--out", out.to_str().unwrap()], &path);
        assert_eq!(o.status.code(), Some(0));
    }
    let name = format!("trajectory_seed{}.csv", cfg.ensemble.master_seed);
    let a = std::fs::read_to_string(out_a.join(&name)).unwrap();
    let b = std::fs::read_to_string(out_b.join(&name)).unwrap();
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "n,theta[0],theta_bar[0],sigma");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1000,"));

    cfg.ensemble.seeds = Some(vec![3, 4, 5]);
    let path = write_config(&dir, "sim3", &cfg);
    let out = dir.path().join("three");
    assert_eq!(
        saclt(&["simulate", "--out", out.to_str().unwrap()], &path)
            .status
            .code(),
        Some(0)
    );
    for s in [3, 4, 5] {
        assert!(out.join(format!("trajectory_seed{s}.csv")).exists());
    }
    let o = saclt(
        &["simulate", "--out", out.to_str().unwrap(), "--seed", "77"],
        &path,
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("trajectory_seed77.csv").exists());
}

#[test]
fn simulate_without_output_dir_is_a_usage_error() {
    let o = saclt(&["simulate"], &preset_path("scalar_slow"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn clt_check_passes_on_slow_preset() {
    let dir = TempDir::new().unwrap();
    let before = std::fs::read(preset_path("scalar_slow")).unwrap();
    let o = saclt(
        &["clt-check", "--out", dir.path().to_str().unwrap()],
        &preset_path("scalar_slow"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(std::fs::read(preset_path("scalar_slow")).unwrap(), before);
    let report: CltReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert!(report.pass);
    assert_eq!(report.targets[0].count, 2000);
    assert_eq!(report.master_seed, 1001);
    // lossless round trip
    let again = serde_json::to_string_pretty(&report).unwrap() + "\n";
    assert_eq!(
        again,
        std::fs::read_to_string(dir.path().join("report.json")).unwrap()
    );
}

#[test]
fn clt_check_fails_with_tiny_tolerance() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small("scalar_slow", 300, 10_000);
    cfg.tolerances.raw = 1e-6;
    cfg.tolerances.averaged = 1e-6;
    let o = saclt(&["clt-check"], &write_config(&dir, "tight", &cfg));
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("overall FAIL"));
}

#[test]
fn clt_check_reports_each_target_of_the_double_well() {
    let dir = TempDir::new().unwrap();
    let cfg = small("double_well", 400, 10_000);
    let out = dir.path().join("out");
    let o = saclt(
        &["clt-check", "--out", out.to_str().unwrap()],
        &write_config(&dir, "dw", &cfg),
    );
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    let report: CltReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.targets.len(), 2);
    assert!(report.targets.iter().all(|t| t.count > 100));
    assert_eq!(
        report.targets.iter().map(|t| t.count).sum::<usize>() + report.unconverged,
        400
    );
}

#[test]
fn clt_check_accepts_a_theory_file() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small("two_state_markov", 200, 5_000);
    cfg.output.dump_samples = true;
    let path = write_config(&dir, "mk", &cfg);
    let th = saclt(
        &["lyapunov", "--out", dir.path().join("th").to_str().unwrap()],
        &path,
    );
    assert_eq!(th.status.code(), Some(0));
    let theory_path = dir.path().join("th").join("theory.json");
    let parsed: TheoryFile =
        serde_json::from_str(&std::fs::read_to_string(&theory_path).unwrap()).unwrap();
    assert_eq!(parsed.targets.len(), 1);

    let inline = dir.path().join("inline");
    let loaded = dir.path().join("loaded");
    saclt(&["clt-check", "--out", inline.to_str().unwrap()], &path);
    saclt(
        &[
            "clt-check",
            "--out",
            loaded.to_str().unwrap(),
            "--theory",
            theory_path.to_str().unwrap(),
        ],
        &path,
    );
    let a = std::fs::read(inline.join("report.json")).unwrap();
    let b = std::fs::read(loaded.join("report.json")).unwrap();
    assert_eq!(a, b);
    let csv = std::fs::read_to_string(inline.join("samples.csv")).unwrap();
    assert!(csv.starts_with("replicate,target,Z[0],W[0]\n"));
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn seed_override_changes_the_report() {
    let dir = TempDir::new().unwrap();
    let cfg = small("scalar_slow", 150, 2_000);
    let path = write_config(&dir, "s", &cfg);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    saclt(&["clt-check", "--out", a.to_str().unwrap()], &path);
    saclt(
        &["clt-check", "--out", b.to_str().unwrap(), "--seed", "99"],
        &path,
    );
    let ra: CltReport =
        serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let rb: CltReport =
        serde_json::from_str(&std::fs::read_to_string(b.join("report.json")).unwrap()).unwrap();
    assert_eq!(rb.master_seed, 99);
    assert_ne!(ra.targets[0].raw, rb.targets[0].raw);
}

fn kernel_config(family: serde_json::Value, root: f64) -> serde_json::Value {
    json!({
        "name": "poisson",
        "problem": {
            "kind": "kernel",
            "family": family,
            "dynamics": "controlled_markov",
            "roots": [[root]]
        },
        "theta0": [0.0],
        "schedule": {"gamma_star": 1.0, "exponent_a": 0.7},
        "truncation": {"kind": "none"},
        "ensemble": {"replicates": 10, "horizon": 100, "master_seed": 1, "classify_radius": 0.5}
    })
}

fn poisson(config: &Path, extra: &[&str]) -> PoissonReport {
    let mut args = vec!["poisson"];
    args.extend_from_slice(extra);
    let o = saclt(&args, config);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn poisson_iid_reduction() {
    let dir = TempDir::new().unwrap();
    let fam = json!({"kind": "iid", "probs": [0.25, 0.75], "values": [[2.0], [-1.0]]});
    let path = write_json(&dir, "iid", &kernel_config(fam, 0.0));
    let r = poisson(&path, &["--theta", "0.4"]);
    assert!((r.h[0] - (0.5 - 0.75 - 0.4)).abs() < 1e-14);
    // Ĥ is the centred observation and QĤ vanishes
    let mean = 0.25 * 2.0 - 0.75;
    assert!((r.g_hat[0][0] - (2.0 - mean)).abs() < 1e-14);
    assert!(r.qg_hat.iter().all(|row| row[0].abs() < 1e-14));
    let var = 0.25 * 0.75 * 9.0;
    assert!((r.u_star[0][0] - var).abs() < 1e-13);
}

#[test]
fn poisson_two_state_chain() {
    let dir = TempDir::new().unwrap();
    let fam =
        json!({"kind": "custom", "matrix": [[0.7, 0.3], [0.6, 0.4]], "values": [[0.0], [1.0]]});
    let path = write_json(&dir, "two", &kernel_config(fam, 0.0));
    let r = poisson(&path, &[]);
    assert!((r.pi[0] - 2.0 / 3.0).abs() < 1e-14);
    assert!((r.pi[1] - 1.0 / 3.0).abs() < 1e-14);
    // the default θ is the refined root of h(θ) = 1/3 - θ
    assert!((r.theta[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!(r.h[0].abs() < 1e-12);
}

#[test]
fn poisson_identity_residual_is_tiny() {
    let dir = TempDir::new().unwrap();
    let fam = json!({
        "kind": "custom",
        "matrix": [[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25], [0.5, 0.1, 0.1, 0.3], [0.05, 0.05, 0.8, 0.1]],
        "values": [[1.0], [-2.0], [0.5], [3.0]]
    });
    let path = write_json(&dir, "four", &kernel_config(fam, 0.0));
    let out = dir.path().join("p");
    let r = poisson(&path, &["--theta=-1.5", "--out", out.to_str().unwrap()]);
    assert!(r.identity_residual <= 1e-10);
    assert!(r.centering_residual <= 1e-10);
    let file: PoissonReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("poisson.json")).unwrap()).unwrap();
    assert_eq!(file, r);
}

#[test]
fn poisson_needs_a_kernel_problem() {
    assert_eq!(
        saclt(&["poisson"], &preset_path("scalar_slow"))
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        saclt(&["conditions"], &dir.path().join("missing.json"))
            .status
            .code(),
        Some(2)
    );
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(preset_path("scalar_slow")).unwrap())
            .unwrap();
    v["schedule"]["bogus"] = json!(1);
    let path = write_json(&dir, "unknown", &v);
    let o = saclt(&["lyapunov"], &path);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    v["schedule"] = json!({"gamma_star": 1.0, "exponent_a": 0.3});
    assert_eq!(
        saclt(&["lyapunov"], &write_json(&dir, "exp", &v))
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn non_hurwitz_root_fails_conditions() {
    let dir = TempDir::new().unwrap();
    let mut cfg = preset("scalar_slow");
    cfg.problem = saclt::config::ProblemSpec::Linear {
        a: vec![vec![0.5]],
        root: vec![1.0],
        noise_covariance: vec![vec![1.0]],
    };
    let path = write_config(&dir, "unstable", &cfg);
    let o = saclt(&["conditions"], &path);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("not Hurwitz"));
    // lyapunov surfaces the spectral error with the target index
    let o = saclt(&["lyapunov"], &path);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("target 0"));
}

#[test]
fn preset_names_resolve_when_no_such_file_exists() {
    let by_name = saclt(&["lyapunov"], Path::new("scalar_fast"));
    let by_path = saclt(&["lyapunov"], &preset_path("scalar_fast"));
    assert_eq!(by_name.status.code(), Some(0));
    assert_eq!(by_name.stdout, by_path.stdout);
    assert_eq!(
        saclt(&["lyapunov"], Path::new("no_such_preset"))
            .status
            .code(),
        Some(2)
    );
}
