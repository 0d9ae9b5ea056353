//! Library-level runs over the fixture panoramas with mock services.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use curbsight_core::clients::ImageRef;
use curbsight_core::coco::CocoDataset;
use curbsight_core::config::{Config, LoadedConfig};
use curbsight_core::pipeline::{assemble_context, list_inputs, Pipeline};
use curbsight_core::retrieval::{index_exemplars, ingest_documents};
use curbsight_core::schema::RecordStatus;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn load(overrides: &[&str]) -> LoadedConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::load(Some(&fixtures().join("config.toml")), &overrides).unwrap()
}

/// A pipeline whose stores are filled in memory from the fixture corpus.
fn pipeline(cfg: &LoadedConfig) -> Pipeline {
    let c = &cfg.config;
    let schema = Arc::new(c.load_schema().unwrap());
    let services = c.build_services(Arc::clone(&schema), None).unwrap();
    let (mut text, mut visual) = c.load_stores().unwrap();
    assert!(text.is_empty() && visual.is_empty(), "fixture stores should not be checked in");
    let mut docs: Vec<PathBuf> = std::fs::read_dir(fixtures().join("kb")).unwrap().map(|e| e.unwrap().path()).collect();
    docs.sort();
    ingest_documents(&docs, services.text_embedder.as_ref(), &mut text, c.chunking).unwrap();
    let ann = CocoDataset::load(&fixtures().join("exemplars/annotations.json")).unwrap();
    let report = index_exemplars(
        &ann,
        &fixtures().join("panos"),
        services.image_embedder.as_ref(),
        &mut visual,
        &schema,
        c.pipeline.pad_fraction,
    )
    .unwrap();
    assert!(report.skipped.is_empty());
    Pipeline::new(c.pipeline.clone(), c.prompts.clone(), schema, text, visual, services).unwrap()
}

#[test]
fn batch_output_does_not_depend_on_worker_count() {
    let cfg = load(&[]);
    let p = pipeline(&cfg);
    let inputs = list_inputs(&fixtures().join("panos")).unwrap();
    assert_eq!(inputs.len(), 3);
    let one = p.run_batch(&inputs, 1).unwrap();
    let four = p.run_batch(&inputs, 4).unwrap();
    assert_eq!(one.records_jsonl(), four.records_jsonl());
    assert!(!one.has_failures());
    let totals = one.totals();
    assert_eq!(totals.records, 13);
    assert_eq!(totals.invalid, 0);

    // Record ids are per panorama and sequential.
    let ids: Vec<String> = one
        .scenes
        .iter()
        .flat_map(|s| s.result.as_ref().unwrap().records.iter().map(|r| r.object_id.clone()))
        .collect();
    assert_eq!(&ids[..3], ["pano_001-000", "pano_001-001", "pano_001-002"]);
    for s in &one.scenes {
        for r in &s.result.as_ref().unwrap().records {
            assert!(p.schema.validate_record(r).valid, "{r:?}");
        }
    }
}

#[test]
fn seam_crossing_object_is_reported_wrapped() {
    let cfg = load(&[]);
    let p = pipeline(&cfg);
    let inputs = list_inputs(&fixtures().join("panos")).unwrap();
    let out = p.run_batch(&inputs[..1], 1).unwrap();
    let records = &out.scenes[0].result.as_ref().unwrap().records;
    let lamp = records.iter().find(|r| r.category == "Street Light").expect("lamp found");
    assert!(lamp.bbox.is_seam_crossing(), "{:?}", lamp.bbox);
    // Below-threshold and non-schema detections produce no record.
    assert!(records.iter().all(|r| p.schema.category(&r.category).is_some()));
    assert_eq!(records.iter().filter(|r| r.category == "Fire Hydrant").count(), 1);
}

#[test]
fn malformed_model_output_marks_every_record_invalid() {
    let cfg = load(&["services.vlm.mode=\"malformed\""]);
    let p = pipeline(&cfg);
    let inputs = list_inputs(&fixtures().join("panos")).unwrap();
    let out = p.run_batch(&inputs, 2).unwrap();
    let totals = out.totals();
    assert_eq!(totals.records, 13);
    assert_eq!(totals.invalid, 13);
    assert!(out.has_failures());
    for s in &out.scenes {
        for r in &s.result.as_ref().unwrap().records {
            assert_eq!(r.status, RecordStatus::Invalid);
            assert!(r.attributes.iter().all(|a| a.value == "unknown"));
        }
    }
}

#[test]
fn retrieval_context_is_ordered_and_filtered() {
    let cfg = load(&[]);
    let p = pipeline(&cfg);
    let pano = image::open(fixtures().join("panos/pano_001.png")).unwrap().to_rgb8();
    let crop = image::imageops::crop_imm(&pano, 240, 150, 40, 40).to_image();
    let category = p.schema.category("Bollard").unwrap();
    let ctx = p.retrieve(category, ImageRef { id: "probe", raster: &crop }).unwrap();
    assert_eq!(ctx.text_hits.len(), cfg.config.pipeline.k);
    assert!(ctx.text_hits.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(!ctx.exemplars.is_empty() && ctx.exemplars.len() <= cfg.config.pipeline.m);
    assert!(ctx.exemplars.iter().all(|e| e.exemplar.category == "Bollard"));
    assert!(ctx.exemplars.windows(2).all(|w| w[0].score >= w[1].score));

    let prompt = assemble_context(&ctx, &p.prompts, p.config.context_char_budget).unwrap();
    let first = prompt.find(&ctx.text_hits[0].chunk.body.trim()[..20]).unwrap();
    let second = prompt.find(&ctx.text_hits[1].chunk.body.trim()[..20]).unwrap();
    assert!(first < second);
    assert!(prompt.find("Object category: Bollard").unwrap() < first);
    assert!(prompt.contains("[P1] Bollard"));
}

#[test]
fn echoed_prompt_is_not_mistaken_for_a_record() {
    let cfg = load(&["services.vlm.mode=\"echo\"", "pipeline.k=1", "pipeline.m=1"]);
    let p = pipeline(&cfg);
    let inputs = list_inputs(&fixtures().join("panos")).unwrap();
    let out = p.run_batch(&inputs[2..], 1).unwrap();
    // The prompt restates the output contract, which is not a usable
    // record, so every object fails extraction.
    let records = &out.scenes[0].result.as_ref().unwrap().records;
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r.status == RecordStatus::Invalid));
}
