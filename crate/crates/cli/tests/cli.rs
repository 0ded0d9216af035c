use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ncindex"));
    c.env("NCINDEX_THREADS", "1");
    c
}

fn run_scenario(scenario: &str, out: &Path) -> Output {
    bin().args(["run", "--scenario", scenario, "--out"]).arg(out).output().unwrap()
}

fn schema() -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn load(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn re(v: &Value) -> f64 {
    v[0][0].as_f64().unwrap()
}

fn assert_valid(report: &Value) {
    let v = schema();
    let errors: Vec<String> = v.iter_errors(report).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
}

#[test]
fn classical_scenario_matches_riemann_roch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run_scenario("classical_rr_c1.json", &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r = load(&out);
    assert_valid(&r);
    assert!((re(&r["index"]["analytic_index"]) - 1.0).abs() < 1e-6);
    assert!((re(&r["index"]["topological_index"]) - 1.0).abs() < 1e-10);
    assert_eq!(r["passed"], Value::Bool(true));
}

#[test]
fn cover_scenario_l2_index_equals_base_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run_scenario("flat_z3_cover", &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r = load(&out);
    assert_valid(&r);
    let c = &r["cover"];
    let base = c["base_index"].as_f64().unwrap();
    assert!((c["l2_index"].as_f64().unwrap() - base).abs() < 1e-6);
    assert_eq!(c["cover_index"].as_f64().unwrap().round(), 3.0 * base.round());
    for d in c["delocalized"].as_array().unwrap() {
        let z = &d["cover"];
        assert!(z[0].as_f64().unwrap().hypot(z[1].as_f64().unwrap()) < 1e-6);
    }
}

#[test]
fn every_bundled_report_validates() {
    let dir = tempfile::tempdir().unwrap();
    for s in ["m2c_center_valued", "bloch_retraction"] {
        let out = dir.path().join(format!("{s}.json"));
        let o = run_scenario(s, &out);
        assert!(o.status.success(), "{s}: {}", String::from_utf8_lossy(&o.stdout));
        assert_valid(&load(&out));
    }
    // the schema is not vacuous
    let mut r = load(&dir.path().join("bloch_retraction.json"));
    r["chern"]["degree0"] = serde_json::json!([[1.0]]);
    assert!(!schema().is_valid(&r));
    r.as_object_mut().unwrap().remove("chern");
    assert!(!schema().is_valid(&r));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for s in ["bloch_retraction", "classical_rr_c1"] {
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        assert!(run_scenario(s, &a).status.success());
        assert!(run_scenario(s, &b).status.success());
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{s}");
    }
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"name":"x","algebra":{"blocks":[1]},"grid":{"n":"16"},"bundle":{"presentation":"automorphy","chern":1}}"#, "grid.n"),
        (r#"{"name":"x","algebra":{"blocks":[1]},"grid":{"n":16},"bundle":{"presentation":"automorphy","chern":"one"}}"#, "bundle.chern"),
        (r#"{"name":"x","algebra":{"blocks":[1]},"grid":{"n":16},"bundle":{"presentation":"automorphy","chern":1},"sede":3}"#, "sede"),
        (
            r#"{"name":"x","algebra":{"blocks":[1]},"grid":{"n":16},"bundle":{"presentation":"automorphy","chern":1},
               "expect":[{"quantity":"index.analytic","value":1,"tol":1e-6,"provenance":""}]}"#,
            "expect[0].provenance",
        ),
        (
            r#"{"name":"x","algebra":{"blocks":[1]},"grid":{"n":16},"bundle":{"presentation":"automorphy","chern":1,"fiber":{"matrix":[[[2,0]]]}}}"#,
            "bundle.fiber",
        ),
    ];
    for (text, field) in cases {
        let cfg = write_config(dir.path(), text);
        let o = bin().args(["run", "--scenario"]).arg(&cfg).arg("--out").arg(dir.path().join("r.json")).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{text}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("`{field}`")), "expected {field} in {err}");
    }
}

#[test]
fn failed_expectations_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"name":"wrong","seed":2,"algebra":{"blocks":[1]},"grid":{"n":12},
            "bundle":{"presentation":"automorphy","chern":2},
            "expect":[
              {"quantity":"index.analytic","value":3,"tol":1e-6,"provenance":"deliberately wrong"},
              {"quantity":"index.topological","value":2,"tol":1e-6,"provenance":"degree"},
              {"quantity":"chern.degree0","value":5,"tol":1e-6,"provenance":"deliberately wrong"}
            ]}"#,
    );
    let out = dir.path().join("r.json");
    let o = bin().args(["run", "--scenario"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let r = load(&out);
    assert_valid(&r);
    let passed: Vec<bool> = r["expectations"].as_array().unwrap().iter().map(|e| e["passed"].as_bool().unwrap()).collect();
    assert_eq!(passed, vec![false, true, false]);
}

#[test]
fn csv_export_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--scenario", "classical_rr_c1", "--out"])
        .arg(dir.path().join("r.json"))
        .arg("--csv-dir")
        .arg(dir.path().join("csv"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("csv/classical_rr_c1_chern.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("x,y,"));
    assert_eq!(lines.len(), 1 + 16 * 16);
    assert!(dir.path().join("csv/classical_rr_c1_curvature.csv").exists());
}

#[test]
fn list_and_suites() {
    let o = bin().arg("list").output().unwrap();
    let text = String::from_utf8_lossy(&o.stdout);
    for s in ["classical_rr_c1.json", "flat_z3_cover.json"] {
        assert!(text.contains(s));
    }
    let o = bin().args(["suite", "modules"]).output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let o = bin().args(["suite", "everything"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}
