use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use sphereflow_cli::artifacts::{sha256_hex, Artifacts, Manifest};
use sphereflow_cli::config::StepSize;
use sphereflow_cli::run::{run_diagnostics, run_experiment, simulate};
use sphereflow_cli::sweep::{parse_values, run_sweep, SweepParam};
use sphereflow_cli::{load, prepare, CliError};

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn sphereflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sphereflow")).args(args).output().unwrap()
}

fn stderr_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1e-12)
}

#[test]
fn cap_disc_matches_golden_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cap");
    let res = sphereflow(&["run", "--config", bundled("cap_disc.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let manifest: Manifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
    assert!(listed.contains(&"trajectory.csv") && listed.contains(&"energy.csv"));

    let golden: Value = serde_json::from_slice(&fs::read(fixture("cap_disc_golden.json")).unwrap()).unwrap();
    let summary: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    for key in ["penalty_integral", "dt"] {
        assert!(close(summary[key].as_f64().unwrap(), golden[key].as_f64().unwrap()), "{key}");
    }
    assert_eq!(summary["steps"], golden["steps"]);
    assert_eq!(summary["snapshots"], golden["snapshots"]);
    for key in ["gl_energy", "dirichlet_energy"] {
        let got = summary["final"][key].as_f64().unwrap();
        assert!(close(got, golden["final"][key].as_f64().unwrap()), "final {key} = {got}");
    }
    for key in ["final_distance", "spacetime_distance"] {
        let got = summary["projected"][key].as_f64().unwrap();
        assert!(close(got, golden["projected"][key].as_f64().unwrap()), "projected {key} = {got}");
    }
}

#[test]
fn manifest_lists_every_file_with_its_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare(load(&bundled("one_sided_cap.json")).unwrap()).unwrap();
    let outcome = run_experiment(&prep, dir.path(), None).unwrap();
    let mut on_disk = Vec::new();
    let mut stack = vec![dir.path().to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                on_disk.push(path.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.sort();
    let listed: Vec<String> = outcome.manifest.files.iter().map(|f| f.path.clone()).collect();
    assert_eq!(listed, on_disk);
    for f in &outcome.manifest.files {
        let bytes = fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.path);
    }
}

#[test]
fn cfl_violation_exits_2_and_names_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_slice(&fs::read(bundled("cap_disc.json")).unwrap()).unwrap();
    cfg["solver"]["dt"] = Value::from(0.01);
    let path = dir.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("never");
    let res = sphereflow(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr_json(&res);
    assert_eq!(err["kind"], "cfl-violated");
    let bound = (1.0 / 32.0f64).powi(2) / 4.0;
    assert!(close(err["detail"]["bound"].as_f64().unwrap(), bound));
    assert!(err["message"].as_str().unwrap().contains("stability bound"));
    assert!(!out.exists(), "validation must fail before any output");
}

#[test]
fn runtime_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_slice(&fs::read(bundled("cap_disc.json")).unwrap()).unwrap();
    cfg["solver"]["lambda"] = Value::from(1e6);
    cfg["solver"]["penalty_integration"] = Value::from("explicit");
    let path = dir.path().join("stiff.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let res = sphereflow(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(stderr_json(&res)["kind"], "norm-blowup");
}

#[test]
fn empty_sweep_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let res = sphereflow(&[
        "sweep",
        "--config",
        bundled("cap_disc.json").to_str().unwrap(),
        "--param",
        "lambda",
        "--values",
        "",
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_json(&res)["stage"], "validation");
}

#[test]
fn unknown_keys_and_bad_dt_are_config_errors() {
    let base: Value = serde_json::from_slice(&fs::read(bundled("cap_disc.json")).unwrap()).unwrap();
    let mut extra = base.clone();
    extra["solver"]["lamda"] = Value::from(10.0);
    assert!(serde_json::from_value::<sphereflow_cli::ExperimentConfig>(extra).is_err());

    let mut cfg: sphereflow_cli::ExperimentConfig = serde_json::from_value(base).unwrap();
    cfg.solver.dt = StepSize::Keyword("fast".into());
    let err = prepare(cfg).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn seed_overrides_random_initial_data() {
    let mut cfg = load(&bundled("random_disc.json")).unwrap();
    let a = prepare(cfg.clone()).unwrap();
    cfg.seed = Some(12);
    let b = prepare(cfg.clone()).unwrap();
    cfg.seed = Some(11);
    let c = prepare(cfg).unwrap();
    assert_ne!(a.u0.values(), b.u0.values());
    assert_eq!(a.u0.values(), c.u0.values());
}

#[test]
fn sweep_values_accept_fractions() {
    assert_eq!(parse_values("1/16, 1/32").unwrap(), vec![0.0625, 0.03125]);
    assert_eq!(parse_values("100,1e3").unwrap(), vec![100.0, 1000.0]);
    assert!(parse_values(" , ").is_err());
    assert!(parse_values("1/0").is_err());
    assert!("mu".parse::<SweepParam>().is_err());
}

#[test]
fn lambda_sweep_distance_is_nonincreasing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&bundled("cap_disc.json")).unwrap();
    let out = run_sweep(&cfg, SweepParam::Lambda, &[1e2, 1e3, 1e4], dir.path(), None).unwrap();
    assert_eq!(out.rows.len(), 3);
    let d: Vec<f64> = out.rows.iter().map(|r| r.final_distance_projected.unwrap()).collect();
    assert!(d.windows(2).all(|w| w[1] <= w[0]), "{d:?}");
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn hedgehog_h_sweep_probe_is_near_8pi() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&bundled("hedgehog_ball.json")).unwrap();
    let out = run_sweep(&cfg, SweepParam::H, &[1.0 / 16.0, 1.0 / 32.0], dir.path(), Some(2)).unwrap();
    let target = 8.0 * std::f64::consts::PI;
    for r in &out.rows {
        let m = r.mbar_probe.unwrap();
        assert!((m - target).abs() <= 0.15 * target, "h = {}: {m}", r.h);
    }
}

#[test]
fn diagnostics_leave_snapshots_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare(load(&bundled("cap_disc.json")).unwrap()).unwrap();
    let traj = simulate(&prep).unwrap();
    let digest = |t: &sphereflow_core::flow::Trajectory| -> Vec<String> {
        t.snapshots()
            .iter()
            .map(|s| {
                let bytes: Vec<u8> = s.field.values().iter().flat_map(|x| x.to_le_bytes()).collect();
                sha256_hex(&bytes)
            })
            .collect()
    };
    let before = digest(&traj);
    let mut art = Artifacts::create(dir.path()).unwrap();
    run_diagnostics(&prep, &traj, &mut art).unwrap();
    assert_eq!(digest(&traj), before);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let prep = prepare(load(&bundled("cap_disc.json")).unwrap()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_experiment(&prep, a.path(), Some(1)).unwrap().manifest;
    let mb = run_experiment(&prep, b.path(), Some(4)).unwrap().manifest;
    assert_eq!(ma.files, mb.files);
}
