use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_brakeorbit"));
    c.env_remove("BRAKEORBIT_SEED");
    c
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--output").arg(out).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_valid(schema: &str, file: &Path) {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(repo().join("schemas").join(schema)).unwrap()).unwrap();
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let errs: Vec<String> = v.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errs.is_empty(), "{} fails {schema}: {errs:?}", file.display());
}

fn json(file: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap()
}

#[test]
fn brake_orbit_reports_half_period() {
    let d = scratch("brake");
    let o = run(&["brake-orbit", "--potential", "harmonic", "--dim", "1", "--energy", "0.5", "--start", "1.0"], &d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("T=3.14159"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(d.join("brake_orbit.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,q1,v1,energy_residual");
    assert!(csv.lines().count() > 10);
    assert_valid("brake_orbit.schema.json", &d.join("brake_orbit.json"));
}

#[test]
fn morse_finds_the_conjugate_point() {
    let d = scratch("morse");
    let o = run(
        &["morse", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--start", "1,0", "--arc", "0.7", "--samples", "64", "--broken"],
        &d,
    );
    assert!(o.status.success(), "{o:?}");
    assert_valid("morse.schema.json", &d.join("morse.json"));
    let r = json(&d.join("morse.json"));
    let cps = r["conjugate_points"].as_array().unwrap();
    assert_eq!(cps.len(), 1);
    assert!((cps[0]["s"].as_f64().unwrap() - std::f64::consts::PI / 8.0).abs() < 1e-3);
    assert_eq!(r["index"], 1);
    assert_eq!(r["broken"]["index"], 1);
    let stairs = std::fs::read_to_string(d.join("staircase.csv")).unwrap();
    assert_eq!(stairs.lines().next().unwrap(), "s,index,nullity");
}

#[test]
fn geodesic_and_distance_outputs_validate() {
    let d = scratch("geo");
    let o = run(&["geodesic", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--start", "1,0", "--arc", "0.5"], &d);
    assert!(o.status.success(), "{o:?}");
    assert_valid("geodesic.schema.json", &d.join("geodesic.json"));
    let o = run(
        &["geodesic", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--start", "0,0", "--velocity", "1,0", "--arc", "0.2", "--format", "json"],
        &d,
    );
    assert!(o.status.success(), "{o:?}");
    assert_valid("geodesic.schema.json", &d.join("geodesic.json"));
    assert_valid("rows.schema.json", &d.join("geodesic_rows.json"));
    assert_eq!(json(&d.join("geodesic.json"))["boundary_start"], false);

    for backend in ["shooting", "variational"] {
        let o = run(&["distance", "--potential", "harmonic", "--dim", "1", "--energy", "0.5", "--point", "0", "--backend", backend], &d);
        assert!(o.status.success(), "{o:?}");
        assert_valid("distance.schema.json", &d.join("distance.json"));
        let v = json(&d.join("distance.json"))["value"].as_f64().unwrap();
        assert!((v - std::f64::consts::PI / 8.0).abs() < 1e-4, "{backend}: {v}");
    }
}

#[test]
fn distance_field_in_both_formats() {
    let d = scratch("field");
    let args = ["distance-field", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--grid", "4x4"];
    let o = run(&args, &d);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(d.join("distance_field.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert_valid("distance_field.schema.json", &d.join("distance_field.json"));
    let mut args = args.to_vec();
    args.extend(["--format", "json"]);
    let o = run(&args, &d);
    assert!(o.status.success(), "{o:?}");
    assert_valid("rows.schema.json", &d.join("distance_field_rows.json"));
    assert_eq!(json(&d.join("distance_field_rows.json")).as_array().unwrap().len(), 16);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = scratch("config");
    std::fs::create_dir_all(&d).unwrap();
    let cfg = d.join("run.json");
    std::fs::write(&cfg, r#"{"potential": "harmonic", "dim": 1, "energy": 0.5, "point": [0.5], "backend": "variational"}"#).unwrap();
    let o = bin().args(["distance", "--config"]).arg(&cfg).args(["--point", "0"]).arg("--output").arg(&d).output().unwrap();
    assert!(o.status.success(), "{o:?}");
    let r = json(&d.join("distance.json"));
    assert_eq!(r["point"][0], 0.0);
    assert_eq!(r["backend"], "variational");
}

#[test]
fn seed_comes_from_the_environment_unless_flagged() {
    let d = scratch("seed");
    let base = ["distance", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--point", "0.2,0.1"];
    let o = bin().args(base).arg("--output").arg(&d).env("BRAKEORBIT_SEED", "11").output().unwrap();
    assert!(o.status.success());
    assert_eq!(json(&d.join("distance.json"))["seed"], 11);
    let o = bin().args(base).args(["--seed", "5"]).arg("--output").arg(&d).env("BRAKEORBIT_SEED", "11").output().unwrap();
    assert!(o.status.success());
    assert_eq!(json(&d.join("distance.json"))["seed"], 5);
}

#[test]
fn usage_errors_exit_one() {
    let d = scratch("usage");
    let cases: Vec<Vec<&str>> = vec![
        vec!["brake-orbit", "--potential", "nope", "--dim", "1", "--energy", "0.5", "--start", "1"],
        vec!["distance", "--potential", "harmonic", "--dim", "1", "--energy", "0.5", "--point", "3"],
        vec!["distance", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--point", "0.1"],
        vec!["geodesic", "--potential", "harmonic", "--dim", "1", "--energy", "0.5", "--start", "1"],
        vec!["distance-field", "--potential", "harmonic", "--dim", "2", "--energy", "0.5", "--grid", "4"],
        vec!["morse", "--potential", "harmonic", "--dim", "1", "--energy", "0.5", "--start", "x", "--arc", "0.5"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = run(&args, &d);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    std::fs::create_dir_all(&d).unwrap();
    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"tol_null": -1}"#).unwrap();
    let o = bin().args(["verify", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let spec = d.join("spec.json");
    std::fs::write(&spec, r#"{"name": "x", "dim": 1, "kind": "weird", "energy": 0.5}"#).unwrap();
    let o = bin().args(["brake-orbit", "--potential"]).arg(&spec).args(["--start", "1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("distance-field"));
}

#[test]
fn numerical_failure_exits_two() {
    let d = scratch("escape");
    let ramp = repo().join("potentials/ramp.json");
    let o = bin().args(["brake-orbit", "--potential"]).arg(&ramp).args(["--start", "0.01", "--output"]).arg(&d).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_passes_and_validates() {
    let d = scratch("verify");
    let o = bin().arg("verify").arg("--output").arg(&d).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_valid("verify.schema.json", &d.join("verify.json"));
    assert_eq!(json(&d.join("verify.json"))["all_passed"], true);
}
