use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kvnsim"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{
  "name": "small",
  "grid": {"axes": [{"label": "q", "levels": 16, "extent": 8.0}, {"label": "p", "levels": 16, "extent": 8.0}]},
  "system": {"builtin": "harmonic_oscillator"},
  "dt": 0.05,
  "t_final": 0.5,
  "snapshot_stride": 5,
  "initial_state": {"kind": "gaussian", "center": [1.0, 0.0], "sigmas": [1.0, 1.0]},
  "observables": [{"kind": "moment", "name": "q", "axis": "q"}],
  "gates": {"norm_drift": 1e-9}
}"#;

fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn check_prints_ok_and_defaults() {
    let out = bin().args(["check", "--config"]).arg(scenario("exponential_1d")).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("OK\n"));
    assert!(stdout.contains("\"scheme\": \"central_fd2\""));
}

#[test]
fn check_reports_levels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replacen("\"levels\": 16", "\"levels\": 3", 1));
    let out = bin().args(["check", "--config"]).arg(cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("levels must be ≥ 4"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"name\": \"small\",", "\"name\": \"small\", \"foo\": true,"));
    let out = bin().args(["check", "--config"]).arg(cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("unknown field `foo`") && err.contains("line 2"), "{err}");
}

#[test]
fn run_writes_manifest_and_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = bin().args(["run", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let hash = report["config_sha256"].as_str().unwrap();
    let manifest = report["manifest"].as_array().unwrap();
    // Initial state plus two strides, psi and density each, plus observables and conservation.
    assert_eq!(manifest.len(), 3 * 2 + 2);
    for entry in manifest {
        let rel = entry["path"].as_str().unwrap();
        let text = std::fs::read_to_string(out_dir.join(rel)).unwrap();
        assert!(text.lines().next().unwrap().contains(hash), "{rel}");
        assert_eq!(entry["bytes"].as_u64().unwrap(), text.len() as u64);
        assert_eq!(entry["partial"], false);
    }
    let psi = std::fs::read_to_string(out_dir.join("snapshots/psi_00002.csv")).unwrap();
    assert!(psi.starts_with("# N=256,dims=16x16,time=5.0000000000000000e-1,"));
    assert_eq!(psi.lines().count(), 257);
    assert_eq!(report["status"], "passed");
}

#[test]
fn failed_gate_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"norm_drift\": 1e-9", "\"norm_drift\": 1e-9, \"oracle_relative_l2\": 1e-9"));
    let out = bin().args(["run", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "gates_failed");
}

#[test]
fn stage_errors_are_tagged_and_flag_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    // Temperature so high that the Maxwellian does not fit the momentum box.
    let text = SMALL.replace(
        r#"{"kind": "gaussian", "center": [1.0, 0.0], "sigmas": [1.0, 1.0]}"#,
        r#"{"kind": "maxwellian", "q_axes": ["q"], "p_axes": ["p"], "mass": 1.0, "temperature": 50.0}"#,
    );
    let cfg = write_config(dir.path(), &text);
    let out = bin().args(["run", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("stage `initial_state` failed"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "aborted");
    assert_eq!(report["error"]["stage"], "initial_state");
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let st = bin()
            .env("KVNSIM_THREADS", threads)
            .args(["run", "--quiet", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(st.status.success());
    }
    assert_eq!(csv_files(&dir.path().join("a")), csv_files(&dir.path().join("b")));
}

#[test]
fn seed_flag_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut hashes = Vec::new();
    for (name, seed) in [("a", "1"), ("b", "2")] {
        let st = bin()
            .args(["run", "--quiet", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(st.status.success());
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(name).join("report.json")).unwrap()).unwrap();
        assert_eq!(r["scenario"]["seed"].as_u64().unwrap(), seed.parse::<u64>().unwrap());
        hashes.push(r["config_sha256"].as_str().unwrap().to_string());
    }
    assert_ne!(hashes[0], hashes[1]);
}

#[test]
fn resources_prints_both_costs() {
    let out = bin().args(["resources", "--config"]).arg(scenario("harmonic_rotation")).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // Two neighbours per axis and no diagonal: s = 4; ℓ = 6, M = 1, d = 1.
    assert_eq!(v["sparsity"], 4);
    assert_eq!(v["quantum_scaling"].as_u64().unwrap(), 2 * 4 * 6 * 64 * 64);
    assert_eq!(v["trajectories"], 10000);
}

#[test]
fn scaling_needs_a_study() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = bin().args(["scaling", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
