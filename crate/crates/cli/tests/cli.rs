use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{Map, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> PathBuf {
    root().join("scenarios").join(name)
}

fn gridmarket(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridmarket"))
        .args(args)
        .output()
        .expect("spawn gridmarket")
}

fn ok(args: &[&str]) -> Output {
    let out = gridmarket(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

fn check(instance: &Value, schema: &str, what: &str) {
    let schema = read_json(&root().join("schema").join(schema));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{what}: {errors:?}");
}

fn csv_cell(s: &str) -> Value {
    if s == "true" || s == "false" {
        return Value::Bool(s == "true");
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    match s.parse::<f64>() {
        Ok(x) => Value::from(x),
        Err(_) => Value::String(s.to_string()),
    }
}

/// Validate every JSON and CSV file in `dir` against the schema named after it.
fn check_dir(dir: &Path) -> usize {
    let mut checked = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if path.is_dir() {
            checked += check_dir(&path);
            continue;
        }
        if let Some(stem) = name.strip_suffix(".json") {
            let schema = if stem == "report" { "summary" } else { stem };
            check(&read_json(&path), &format!("{schema}.schema.json"), &path.display().to_string());
        } else if let Some(stem) = name.strip_suffix(".csv") {
            let mut reader = csv::Reader::from_path(&path).unwrap();
            let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
            for row in reader.records() {
                let row = row.unwrap();
                let object: Map<String, Value> = header.iter().cloned().zip(row.iter().map(csv_cell)).collect();
                check(&Value::Object(object), &format!("{stem}.row.schema.json"), &path.display().to_string());
            }
        } else {
            panic!("unexpected output {}", path.display());
        }
        checked += 1;
    }
    checked
}

#[test]
fn shipped_scenarios_validate() {
    for entry in fs::read_dir(root().join("scenarios")).unwrap() {
        let path = entry.unwrap().path();
        check(&read_json(&path), "scenario.schema.json", &path.display().to_string());
    }
}

#[test]
fn gen_writes_a_valid_123_bus_scenario() {
    let out = ok(&["gen", "--buses", "123", "--gens", "10", "--seed", "1"]);
    let value: Value = serde_json::from_slice(&out.stdout).unwrap();
    check(&value, "scenario.schema.json", "generated scenario");
    assert_eq!(value["network"]["buses"].as_array().unwrap().len(), 123);
    assert_eq!(value["generators"].as_array().unwrap().len(), 10);
    let again = ok(&["gen", "--buses", "123", "--gens", "10", "--seed", "1"]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn every_output_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario("ref5.json");
    let s = s.to_str().unwrap();
    let dir = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    ok(&["run", "--scenario", s, "--out", &dir("run"), "--dump-lambda", "--dump-signals"]);
    ok(&["run", "--scenario", s, "--out", &dir("sweep"), "--sweep-vartheta", "0,1", "--mode", "complete"]);
    ok(&["benchmark", "--scenario", s, "--out", &dir("benchmark")]);
    ok(&["oracle", "--scenario", s, "--out", &dir("oracle")]);
    ok(&["compare", "--scenario", s, "--out", &dir("compare")]);
    ok(&["report", "--out", &dir("run")]);
    let checked = check_dir(tmp.path());
    assert!(checked >= 30, "only {checked} files checked");
    for name in ["lambda.csv", "signals.csv", "report.json"] {
        assert!(tmp.path().join("run").join(name).exists(), "{name}");
    }
    assert!(tmp.path().join("sweep/sweep.csv").exists());
    assert!(tmp.path().join("sweep/vartheta-1/trace.csv").exists());
}

#[test]
fn report_reproduces_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["run", "--scenario", scenario("feeder13.json").to_str().unwrap(), "--out", out]);
    let printed = ok(&["report", "--out", out]).stdout;
    let summary = fs::read(tmp.path().join("summary.json")).unwrap();
    assert_eq!(printed, summary);
    assert_eq!(fs::read(tmp.path().join("report.json")).unwrap(), summary);
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario("feeder13.json");
    let mut traces = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(threads);
        ok(&["run", "--scenario", s.to_str().unwrap(), "--threads", threads, "--out", out.to_str().unwrap()]);
        traces.push((
            fs::read(out.join("trace.csv")).unwrap(),
            fs::read(out.join("committed.json")).unwrap(),
        ));
    }
    assert!(traces[0] == traces[1]);
}

#[test]
fn compare_reports_agreement_on_ref5() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["compare", "--scenario", scenario("ref5.json").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    let c = read_json(&tmp.path().join("compare.json"));
    assert_eq!(c["slots"].as_array().unwrap().len(), 4);
    assert!(c["max_injection_deviation"].as_f64().unwrap() < 1e-2);
    assert!(c["max_objective_relative_difference"].as_f64().unwrap() < 5e-3);
}

#[test]
fn oracle_and_market_summaries_share_a_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario("ref5.json");
    let run = tmp.path().join("run");
    let oracle = tmp.path().join("oracle");
    ok(&["run", "--scenario", s.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    ok(&["oracle", "--scenario", s.to_str().unwrap(), "--out", oracle.to_str().unwrap()]);
    let a = read_json(&run.join("summary.json"));
    let b = read_json(&oracle.join("summary.json"));
    let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&a), keys(&b));
    let pa = a["generation_par"].as_f64().unwrap();
    let pb = b["generation_par"].as_f64().unwrap();
    assert!((pa - pb).abs() < 1e-2 * pb, "{pa} vs {pb}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{}").unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(gridmarket(&["run", "--scenario", bad.to_str().unwrap(), "--out", out]).status.code(), Some(1));
    assert_eq!(gridmarket(&["run", "--scenario", "missing.json", "--out", out]).status.code(), Some(1));

    let mut broken = read_json(&scenario("ref5.json"));
    broken["network"]["buses"][0]["v_min"] = Value::from(2.0);
    fs::write(&bad, broken.to_string()).unwrap();
    assert_eq!(gridmarket(&["run", "--scenario", bad.to_str().unwrap(), "--out", out]).status.code(), Some(1));

    let s = scenario("ref5.json");
    let code = gridmarket(&["run", "--scenario", s.to_str().unwrap(), "--max-iters", "2", "--out", out]).status.code();
    assert_eq!(code, Some(2));
}
