//! Binary-level behaviour: goldens, exit codes and every subcommand.
//!
//! Goldens live in `fixtures/golden/`; run with `UPDATE_GOLDENS=1` to
//! rewrite them after an intended output change.

mod support;

use std::fs;
use std::path::Path;

use serde_json::Value;
use support::{copy_fixtures, curbsight, fixtures_dir, read, Workspace};

fn golden(name: &str, actual: &str) {
    let path = fixtures_dir().join("golden").join(name);
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDENS=1 to create it)", path.display()));
    assert!(expected == actual, "{name} differs from its golden copy:\n--- expected\n{expected}\n--- actual\n{actual}");
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ready() -> Workspace {
    let ws = copy_fixtures();
    ws.build_stores();
    ws
}

#[test]
fn store_building_reports_counts() {
    let ws = copy_fixtures();
    let o = curbsight(&ws, &["-c", "config.toml", "ingest-kb", "kb/street_furniture.md", "kb/traffic_control.md", "kb/utilities.md"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["docs"], 3);
    let first = report["chunks"].clone();
    assert!(ws.path("stores/text.store.jsonl").exists());

    // Re-ingesting replaces a document's chunks rather than adding to them.
    let o = curbsight(&ws, &["-c", "config.toml", "ingest-kb", "kb/utilities.md"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = read(&ws.path("stores/text.store.jsonl")).lines().count();
    assert_eq!(lines as u64, first.as_u64().unwrap() + 1, "header plus one line per chunk");

    let o = curbsight(&ws, &["-c", "config.toml", "index-exemplars", "exemplars/annotations.json", "panos"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["exemplars"], 12);
    assert_eq!(report["skipped"].as_array().unwrap().len(), 0);
}

#[test]
fn annotate_matches_goldens() {
    let ws = ready();
    let o = curbsight(&ws, &["-c", "config.toml", "annotate", "panos", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    golden("annotate/panos.records.jsonl", &read(&ws.path("out/panos.records.jsonl")));
    golden("annotate/manifest.json", &read(&ws.path("out/manifest.json")));
}

#[test]
fn annotate_single_file_and_custom_name() {
    let ws = ready();
    let o = curbsight(&ws, &["-c", "config.toml", "annotate", "panos/pano_002.png", "--out", "one", "--name", "second"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read(&ws.path("one/second.records.jsonl"));
    assert!(!records.is_empty());
    assert!(records.lines().all(|l| l.contains("\"source_image\":\"pano_002\"")));
    let manifest: Value = serde_json::from_str(&read(&ws.path("one/manifest.json"))).unwrap();
    assert_eq!(manifest["records_file"], "second.records.jsonl");
}

#[test]
fn ground_truth_crops_feed_attribute_evaluation() {
    let ws = ready();
    let o = curbsight(&ws, &["-c", "config.toml", "annotate", "panos", "--gt-crops", "eval/gt.json", "--out", "crops"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read(&ws.path("crops/panos.records.jsonl"));
    assert_eq!(records.lines().count(), 13);
    assert!(records.lines().all(|l| l.contains("\"object_id\":\"ann-")));

    let o = curbsight(
        &ws,
        &["evaluate", "--gt", "eval/gt.json", "--pred", "eval/pred.records.jsonl", "--attributes", "crops/panos.records.jsonl", "--out", "rep"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&read(&ws.path("rep/report.json"))).unwrap();
    let acc = report["attribute_overall"][0].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn evaluate_matches_goldens() {
    let ws = copy_fixtures();
    let o = curbsight(
        &ws,
        &[
            "evaluate",
            "--gt",
            "eval/gt.json",
            "--pred",
            "eval/pred.records.jsonl",
            "--attributes",
            "eval/attributes.records.jsonl",
            "--label",
            "fixture",
            "--out",
            "rep",
            "--csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&ws.path("rep/report.txt"));
    assert_eq!(stdout(&o), text);
    golden("evaluate/report.txt", &text);
    golden("evaluate/report.json", &read(&ws.path("rep/report.json")));
    golden("evaluate/report.csv", &read(&ws.path("rep/report.csv")));
}

#[test]
fn usage_and_configuration_errors_exit_2() {
    let ws = copy_fixtures();
    let cases: &[&[&str]] = &[
        &["-c", "missing.toml", "schema", "show"],
        &["-c", "config.toml", "--set", "pipeline.k=-1", "schema", "show"],
        &["-c", "config.toml", "--set", "pipeline.no_such_key=1", "schema", "show"],
        &["-c", "config.toml", "--set", "without-equals", "schema", "show"],
        &["evaluate"],
        &["annotate"],
        &["no-such-command"],
    ];
    for args in cases {
        let o = curbsight(&ws, args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty(), "{args:?} printed no diagnostic");
    }
    ws.write("broken.toml", "[pipeline\nk = 1\n");
    let o = curbsight(&ws, &["-c", "broken.toml", "schema", "show"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn processing_failures_exit_1() {
    let ws = ready();
    let o = curbsight(&ws, &["-c", "config.toml", "--set", "services.vlm.mode=\"malformed\"", "annotate", "panos", "--out", "bad"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    // Outputs are still written for inspection.
    assert_eq!(read(&ws.path("bad/panos.records.jsonl")).lines().count(), 13);

    let o = curbsight(&ws, &["evaluate", "--gt", "eval/gt.json", "--pred", "no-such-file.jsonl"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn schema_show_and_validate() {
    let ws = copy_fixtures();
    let o = curbsight(&ws, &["schema", "show"]);
    assert!(o.status.success());
    let shown = stdout(&o);
    let schema: Value = serde_json::from_str(&shown).unwrap();
    assert_eq!(schema["categories"].as_array().unwrap().len(), 10);
    ws.write("schema.json", &shown);
    let o = curbsight(&ws, &["schema", "validate", "schema.json"]);
    assert!(o.status.success(), "{}", stderr(&o));

    ws.write("bad_schema.json", r#"{"version": "x", "categories": [{"name": "A", "attributes": [{"name": "c", "kind": "enumerated", "allowed_values": []}]}]}"#);
    let o = curbsight(&ws, &["schema", "validate", "bad_schema.json"]);
    assert_ne!(o.status.code(), Some(0));

    let o = curbsight(&ws, &["schema", "validate", "eval/attributes.records.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let good = read(&ws.path("eval/attributes.records.jsonl"));
    let first = good.lines().next().unwrap().replace("\"grey\"", "\"polka dot\"");
    ws.write("bad.records.jsonl", &format!("{first}\n"));
    let o = curbsight(&ws, &["schema", "validate", "bad.records.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("value-not-allowed"), "{}", stdout(&o));
}

#[test]
fn split_writes_one_png_per_view() {
    let ws = copy_fixtures();
    let o = curbsight(&ws, &["-c", "config.toml", "split", "panos/pano_001.png", "--out", "views"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["v0", "v1", "v2", "v3"] {
        let p = ws.path(&format!("views/pano_001_{v}.png"));
        let img = image::open(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!((img.width(), img.height()), (128, 128));
    }
    let o = curbsight(&ws, &["split", "kb/utilities.md"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn query_answers_with_context() {
    let ws = ready();
    let o = curbsight(
        &ws,
        &["-c", "config.toml", "--set", "services.vlm.mode=\"echo\"", "query", "panos/pano_003.png", "Is the cone damaged?"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let answer = stdout(&o);
    assert!(answer.contains("Is the cone damaged?"));
    assert!(answer.contains("Reference standards:"), "{answer}");
}

#[test]
fn trace_file_records_service_calls() {
    let ws = ready();
    let o = curbsight(&ws, &["-c", "config.toml", "--trace", "trace.jsonl", "annotate", "panos/pano_003.png", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = read(&ws.path("trace.jsonl"));
    let records = read(&ws.path("t/pano_003.records.jsonl")).lines().count();
    // Mock services do not trace themselves; the pipeline logs every
    // prompt it sends and the reply it got.
    let entries: Vec<Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), records);
    for e in &entries {
        assert!(e["service"].as_str().unwrap().starts_with("pipeline."), "{e}");
        assert!(e["request"]["prompt"].as_str().unwrap().contains("Object category:"));
        assert!(e["response"].is_string());
    }
}

#[test]
fn every_subcommand_has_help() {
    let ws = Workspace::new();
    for cmd in ["ingest-kb", "index-exemplars", "split", "annotate", "evaluate", "query", "schema"] {
        let o = curbsight(&ws, &[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        assert!(stdout(&o).contains("Usage:"), "{cmd}");
    }
    let o = curbsight(&ws, &["--version"]);
    assert!(o.status.success());
    assert!(Path::new(env!("CARGO_BIN_EXE_curbsight")).exists());
}
