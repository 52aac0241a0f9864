use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn confcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confcheck"))
        .args(args)
        .env_remove("CONFCHECK_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    confcheck(&args)
}

fn design() -> String {
    fixture("table2.design.json").display().to_string()
}

#[test]
fn healthy_corpus_is_fully_conformant() {
    let tmp = TempDir::new().unwrap();
    let out = simulate(tmp.path(), &["--count", "300", "--seed", "3", "--traces-per-file", "100"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 300 traces in 3 files"));

    let out = confcheck(&["check", "--design", &design(), "--traces", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("Conformance percentage: 100.00%"), "{}", stdout(&out));
}

#[test]
fn injected_corpus_reports_non_conformance() {
    let tmp = TempDir::new().unwrap();
    let out = simulate(tmp.path(), &["--count", "1000", "--seed", "42", "--p-direct", "0.1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 1000 traces in 1 files"));
    let report_dir = TempDir::new().unwrap();
    let report = report_dir.path().join("report.json");
    let traces = tmp.path().to_str().unwrap();
    let out = confcheck(&["check", "--design", &design(), "--traces", traces, "--format", "json", "--max-ids", "5", "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["totalTraces"], 1000);
    assert!(json["conformancePercentage"].as_f64().unwrap() < 1.0);
    assert_eq!(json["violationsByKind"]["missingRequired"], 0);
    assert!(json["tracesByKind"]["disallowedPresent"].as_u64().unwrap() > 0);
    assert_eq!(json["nonConformantTraceIds"].as_array().unwrap().len(), 5);

    // Text and JSON from the same corpus carry the same counts.
    let text = stdout(&confcheck(&["check", "--design", &design(), "--traces", traces, "--workers", "2"]));
    let non_conformant = json["nonConformantTraces"].as_u64().unwrap();
    assert!(text.contains(&format!("Non-conformant traces:  {non_conformant}\n")), "{text}");
    let pct = json["conformancePercentage"].as_f64().unwrap() * 100.0;
    assert!(text.starts_with(&format!("Conformance percentage: {pct:.2}%")));
    let disallowed = json["violationsByKind"]["disallowedPresent"].as_u64().unwrap();
    assert!(text.contains(&format!("{:<20} {:>12} {:>12}", "disallowedPresent", disallowed, non_conformant)), "{text}");
}

#[test]
fn workers_from_environment() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), &["--count", "20"]);
    let out = Command::new(env!("CARGO_BIN_EXE_confcheck"))
        .args(["check", "--design", &design(), "--traces", tmp.path().to_str().unwrap()])
        .env("CONFCHECK_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_confcheck"))
        .args(["check", "--design", &design(), "--traces", tmp.path().to_str().unwrap()])
        .env("CONFCHECK_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn load_failures_exit_2() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), &["--count", "5"]);
    let traces = tmp.path().to_str().unwrap();
    let out = confcheck(&["check", "--design", "/nonexistent/design.json", "--traces", traces]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/design.json"));

    let bad = tmp.path().join("bad.design.json");
    fs::write(&bad, r#"{"designTraces":[{"id":"t","spans":[{"spanId":"A","name":"x","parentSpanId":"Z","match":{"service.name":"s"}}]}]}"#).unwrap();
    let out = confcheck(&["check", "--design", bad.to_str().unwrap(), "--traces", traces]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Z"), "{}", stderr(&out));

    let empty = TempDir::new().unwrap();
    let out = confcheck(&["check", "--design", &design(), "--traces", empty.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_rejects_bad_parameters() {
    let tmp = TempDir::new().unwrap();
    let out = simulate(tmp.path(), &["--p-slow", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("p-slow"), "{}", stderr(&out));
    let out = simulate(tmp.path(), &["--count", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = simulate(tmp.path(), &["--count", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn graph_renders_fixture() {
    let tmp = TempDir::new().unwrap();
    fs::copy(fixture("fig2b.otel.json"), tmp.path().join("fig2b.json")).unwrap();
    let traces = tmp.path().to_str().unwrap();
    let out = confcheck(&["graph", "--design", &design(), "--traces", traces, "--trace-id", "0000000000000000000000000000002B"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let dot = stdout(&out);
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("fillcolor=red"));
    let again = confcheck(&["graph", "--design", &design(), "--traces", traces, "--trace-id", "0000000000000000000000000000002b"]);
    assert_eq!(again.stdout, out.stdout);

    let out = confcheck(&["graph", "--design", &design(), "--traces", traces, "--trace-id", "00000000000000000000000000000099"]);
    assert_eq!(out.status.code(), Some(2));
    let out = confcheck(&["graph", "--design", &design(), "--traces", traces, "--trace-id", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn import_design_round_trip() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    fs::copy(fixture("fig2a.otel.json"), corpus.join("fig2a.json")).unwrap();
    let corpus = corpus.to_str().unwrap();
    let trace_id = "0000000000000000000000000000002a";
    let out_path = tmp.path().join("imported.json");
    let out_str = out_path.to_str().unwrap();

    let out = confcheck(&["import-design", "--traces", corpus, "--trace-id", trace_id, "--keep", "0000000000000002,0000000000000004,0000000000000006", "--out", out_str]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(json["designTraces"][0]["spans"].as_array().unwrap().len(), 3);
    let out = confcheck(&["check", "--design", out_str, "--traces", corpus]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));

    let out = confcheck(&["import-design", "--traces", corpus, "--trace-id", trace_id, "--keep", "0000000000000002,0000000000000006", "--out", out_str]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&out_path).unwrap()).unwrap();
    let spans = json["designTraces"][0]["spans"].as_array().unwrap();
    assert_eq!(spans.len(), 2);
    let leaf = spans.iter().find(|s| s["spanId"] == "0000000000000006").unwrap();
    assert_eq!(leaf["design"]["allowNonImmediateParent"], true);

    let out = confcheck(&["validate-design", out_str]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("ok: 1 design traces"));

    let missing = tmp.path().join("never.json");
    let out = confcheck(&["import-design", "--traces", corpus, "--trace-id", trace_id, "--keep", "00000000000000ff", "--out", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!missing.exists());
}

#[test]
fn validate_design_reports_errors() {
    let out = confcheck(&["validate-design", &design()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("trace-2: disallowed, 2 spans"));

    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("mixed.json");
    fs::write(
        &bad,
        r#"{"designTraces":[{"id":"t","spans":[
            {"spanId":"A","name":"x","match":{"service.name":"s"},"design":{"isDisallowed":true}},
            {"spanId":"B","name":"y","parentSpanId":"A","match":{"service.name":"s"}}]}]}"#,
    )
    .unwrap();
    let out = confcheck(&["validate-design", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(confcheck(&[]).status.code(), Some(2));
    assert_eq!(confcheck(&["check"]).status.code(), Some(2));
    assert_eq!(confcheck(&["frobnicate"]).status.code(), Some(2));
}
