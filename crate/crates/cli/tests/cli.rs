use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hamflow_core::io::read_csv;

fn hamflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamflow")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run(cmd: &str, cfg: &Path, out: &Path) -> Output {
    hamflow(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"system": {"example": {"name": "scalar"}}, "tolerances": {"integrator": "tight"}}"#);
    let o = run("inspect", &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tolerances.integrator"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "unknown.json", r#"{"system": {"example": {"name": "nope"}}}"#);
    assert_eq!(run("inspect", &cfg, dir.path()).status.code(), Some(2));
    assert_eq!(hamflow(&["inspect"]).status.code(), Some(2));
}

#[test]
fn empty_horizons_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tp.json",
        r#"{"system": {"example": {"name": "backstepping"}}, "turnpike": {"x0": [1.0, 1.0], "xf": [0.5, 0.0], "horizons": []}}"#,
    );
    let o = run("turnpike", &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizons"));
}

#[test]
fn scalar_manifold_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "scalar.json",
        r#"{
            "system": {"example": {"name": "scalar"}},
            "manifold": {
                "settings": {"bounds": {"lower": [-3.0], "upper": [0.99], "p_max": 10.0}},
                "grid": {"lower": [-2.0], "upper": [0.9], "counts": [30]},
                "queries": [[1.1]]
            }
        }"#,
    );
    let o = run("manifold", &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cov: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("coverage_stable.json")).unwrap()).unwrap();
    let queries = cov["queries"].as_array().unwrap();
    assert_eq!(queries.len(), 31);
    assert_eq!(queries[0]["status"], "uncovered");
    assert_eq!(queries[0]["query"][0].as_f64().unwrap(), 1.1);
    assert!(queries[1..].iter().all(|q| q["status"] == "covered"));
    let (header, rows) = read_csv(fs::File::open(dir.path().join("projection_stable.csv")).unwrap()).unwrap();
    assert_eq!(header[0], "x1");
    assert!(rows.iter().all(|r| r[0] < 1.0));
}

#[test]
fn lqr_simulation_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "lqr.json",
        r#"{
            "system": {"linear": {"a": [[0.0, 1.0], [0.0, 0.0]], "b": [[0.0], [1.0]], "c": [[1.0, 0.0], [0.0, 1.0]]}},
            "simulate": {"x0": [1.0, -0.5], "t_final": 40.0, "feedback": "lqr", "infinite_horizon": true}
        }"#,
    );
    let o = run("simulate", &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("simulate.json")).unwrap()).unwrap();
    // ½ x0ᵀ P x0 with P = [[√3, 1], [1, √3]].
    let value = 0.5 * (3f64.sqrt() * 1.25 - 1.0);
    assert!((s["cost"].as_f64().unwrap() - value).abs() <= 1e-6);
    assert!((s["infinite_horizon"]["value"].as_f64().unwrap() - value).abs() <= 1e-6);
}

#[test]
fn manifold_feedback_rests_at_origin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "rest.json",
        r#"{
            "system": {"example": {"name": "scalar"}},
            "manifold": {"settings": {"bounds": {"lower": [-3.0], "upper": [0.99], "p_max": 10.0}}},
            "simulate": {"x0": [0.0], "t_final": 2.0, "feedback": "manifold"}
        }"#,
    );
    let o = run("simulate", &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(fs::File::open(dir.path().join("trajectory.csv")).unwrap()).unwrap();
    let u = header.iter().position(|h| h == "u1").unwrap();
    assert!(rows.iter().all(|r| r[u] == 0.0));
}

#[test]
fn uncovered_start_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "outside.json",
        r#"{
            "system": {"example": {"name": "scalar"}},
            "manifold": {"settings": {"bounds": {"lower": [-3.0], "upper": [0.99], "p_max": 10.0}}},
            "turnpike": {"x0": [1.2], "xf": [0.0], "horizons": [1.0], "check_sufficient": true}
        }"#,
    );
    let o = run("turnpike", &cfg, dir.path());
    assert!(stderr(&o).contains("sufficient condition unsatisfied"), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("turnpike.json")).unwrap()).unwrap();
    assert_eq!(r["report"]["sufficient_condition"]["satisfied"], false);
    let converged = r["report"]["all_converged"].as_bool().unwrap();
    assert_eq!(o.status.code(), Some(if converged { 0 } else { 3 }));
}

#[test]
fn turnpike_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tp.json",
        r#"{
            "system": {"example": {"name": "backstepping"}},
            "turnpike": {"x0": [1.0, 1.0], "xf": [0.5, 0.0], "horizons": [10.0, 20.0, 40.0]}
        }"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run("turnpike", &cfg, &a).status.code(), Some(0));
    assert_eq!(run("turnpike", &cfg, &b).status.code(), Some(0));
    for name in ["turnpike.json", "turnpike.csv", "trajectory_T20.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("turnpike.json")).unwrap()).unwrap();
    assert!(r["within_bound"].as_bool().unwrap());
}

#[test]
fn inspect_dashboard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gen.json", r#"{"system": {"example": {"name": "generator"}}}"#);
    assert_eq!(run("inspect", &cfg, dir.path()).status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("inspect.json")).unwrap()).unwrap();
    assert_eq!(r["stabilizable"], true);
    assert_eq!(r["detectable"], true);
    let e = r["growth"]["f_exponent"].as_f64().unwrap();
    assert!((0.8..=1.2).contains(&e), "{e}");

    let cfg = write_config(dir.path(), "scalar.json", r#"{"system": {"example": {"name": "scalar"}}}"#);
    assert_eq!(run("inspect", &cfg, dir.path()).status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("inspect.json")).unwrap()).unwrap();
    assert_eq!(r["penalty_rank"], 0);
    assert_eq!(r["detectable"], false);
    assert_eq!(r["path"], "stable_free_dynamics");
}
