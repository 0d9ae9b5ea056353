//! The transcript corpus in `fixtures/repair_corpus.json`: thirty model
//! replies in four layouts with the outcome each one should produce.

use std::collections::BTreeMap;
use std::path::Path;

use curbsight_core::schema::{extract_and_repair, AttributeSchema, RecordStatus};
use curbsight_core::Error;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    id: String,
    kind: String,
    expected_category: String,
    raw: String,
    expect: String,
    #[serde(default)]
    values: BTreeMap<String, String>,
}

fn corpus() -> Vec<Case> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/repair_corpus.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn corpus_covers_every_layout() {
    let cases = corpus();
    assert_eq!(cases.len(), 30);
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &cases {
        *kinds.entry(c.kind.as_str()).or_default() += 1;
    }
    assert_eq!(kinds.len(), 4, "{kinds:?}");
    assert!(cases.iter().filter(|c| c.kind == "brace_free").all(|c| !c.raw.contains('{') && c.expect == "error"));
}

#[test]
fn every_transcript_has_the_expected_outcome() {
    let schema = AttributeSchema::default_roadside();
    for c in corpus() {
        let got = extract_and_repair(&c.raw, &schema, &c.expected_category);
        match c.expect.as_str() {
            "error" => assert!(matches!(got, Err(Error::Extraction(_))), "{}: {got:?}", c.id),
            want => {
                let rec = got.unwrap_or_else(|e| panic!("{}: {e}", c.id));
                let status = if want == "ok" { RecordStatus::Ok } else { RecordStatus::RepairApplied };
                assert_eq!(rec.status, status, "{}", c.id);
                let report = schema.validate_record(&rec);
                assert!(report.valid, "{}: {:?}", c.id, report.violations);
                let cat = schema.category(&c.expected_category).unwrap();
                assert_eq!(rec.category, cat.name);
                assert_eq!(rec.attributes.len(), cat.attributes.len(), "{}", c.id);
                for (name, value) in &c.values {
                    assert_eq!(rec.attribute(name).map(|a| a.value.as_str()), Some(value.as_str()), "{}: {name}", c.id);
                }
            }
        }
    }
}

#[test]
fn repaired_records_read_back_cleanly() {
    // A record serialized by the pipeline is itself acceptable model output.
    let schema = AttributeSchema::default_roadside();
    for c in corpus().iter().filter(|c| c.expect != "error") {
        let rec = extract_and_repair(&c.raw, &schema, &c.expected_category).unwrap();
        let again = extract_and_repair(&rec.to_json_line(), &schema, &c.expected_category).unwrap();
        assert_eq!(again.status, RecordStatus::Ok, "{}", c.id);
        assert_eq!(again.attributes, rec.attributes, "{}", c.id);
    }
}
