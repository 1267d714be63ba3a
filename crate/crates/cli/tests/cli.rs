use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rcm_cli::output::RunManifest;
use serde_json::Value;

fn rcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcm")).args(args).output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_ensemble_is_a_config_error_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"seed": 1}"#);
    let o =
        rcm(&["moments", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing field `ensemble`"), "{}", stderr(&o));

    let cfg = write(
        tmp.path(),
        "bad2.json",
        r#"{"seed": 1, "ensemble": {"atoms": [{"weight": 1.0, "kind": "linear", "d": 2, "q": 1}]}}"#,
    );
    let o = rcm(&["moments", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ensemble.atoms[0]"), "{}", stderr(&o));

    let o = rcm(&["moments"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rcm(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_map_and_override_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.json",
        r#"{"seed": 1, "ensemble": {"atoms": [{"weight": 1.0, "kind": "diffeo", "a": 1.5}]}}"#,
    );
    let o =
        rcm(&["moments", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let cfg = configs().join("doubling-cos.json");
    let o = rcm(&["moments", "--config", cfg.to_str().unwrap(), "--override", "grid"]);
    assert_eq!(o.status.code(), Some(2));
    let o =
        rcm(&["moments", "--config", cfg.to_str().unwrap(), "--override", "moments.n_max=\"x\""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("moments.n_max"), "{}", stderr(&o));
}

#[test]
fn covariance_of_cos_under_doubling_is_one_half() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cfg = configs().join("doubling-cos.json");
    let o = rcm(&["covariance", "--config", cfg.to_str().unwrap(), "--out", out, "--threads", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let run = tmp.path().join("covariance/doubling-cos-s1");
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let s = summary["sigma2"][0][0].as_f64().unwrap();
    assert!((s - 0.5).abs() < 1e-8, "{s}");
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.passed && manifest.failures.is_empty());
    assert_eq!(manifest.config_hash.len(), 64);
    let names: Vec<&str> = manifest.files.iter().map(|f| f.name.as_str()).collect();
    assert!(names.contains(&"data.csv") && names.contains(&"summary.json"), "{names:?}");
}

#[test]
fn reruns_are_byte_identical_and_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("mix-a.json");
    let cfg = cfg.to_str().unwrap();
    let run = |out: &Path, seed: &str| {
        let o = rcm(&[
            "correlation",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
            "--grid",
            "1024",
            "--override",
            "correlation.samples=20000",
            // The grid-1024 stationary residual bottoms out near 1e-11.
            "--override",
            "stationary.tol=1e-10",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
        let dir = out.join(format!("correlation/mix-a-s{seed}"));
        (fs::read(dir.join("data.csv")).unwrap(), fs::read(dir.join("summary.json")).unwrap())
    };
    let a = run(&tmp.path().join("a"), "5");
    let b = run(&tmp.path().join("b"), "5");
    let c = run(&tmp.path().join("c"), "6");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn failing_check_exits_one_and_is_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    // The coboundary direction has zero limit variance, so no CLT applies.
    let cfg = configs().join("doubling-coboundary.json");
    let o = rcm(&[
        "clt",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
        "--override",
        "clt.samples=200",
        "--override",
        "clt.n=64",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let run = tmp.path().join("clt/doubling-coboundary-s2");
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert!(!manifest.passed);
    assert_eq!(manifest.failures, vec!["clt".to_string()]);
}

#[test]
fn report_behaviour() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    // Empty directory: empty summary.
    let o = rcm(&["report", root.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout), "no runs found\n");
    assert_eq!(
        fs::read_to_string(root.join("report/summary.csv")).unwrap(),
        "run,subcommand,seed,passed,failures\n"
    );

    // A single green run.
    let out = root.to_str().unwrap();
    let cfg = configs().join("doubling-cos.json");
    let o = rcm(&[
        "rde-tail",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
        "--override",
        "rde.samples=2000",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = rcm(&["report", out]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.starts_with("1 runs, 0 failed\nPASS"), "{text}");
    assert!(root.join("report/curves/rde-tail__doubling-cos-s1__data.csv").exists());

    // Mixed runs: the failure is listed first.
    let cob = configs().join("doubling-coboundary.json");
    let o = rcm(&[
        "clt",
        "--config",
        cob.to_str().unwrap(),
        "--out",
        out,
        "--override",
        "clt.samples=200",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = rcm(&["report", out]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "2 runs, 1 failed");
    assert!(lines[1].starts_with("FAIL") && lines[1].contains("clt"), "{text}");
    assert!(lines[2].starts_with("PASS"), "{text}");
}
