//! Helpers shared by the binary-level test targets.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use curbsight_core::schema::AttributeSchema;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self { dir: tempfile::tempdir().expect("tempdir") }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn write(&self, rel: &str, body: &str) {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(p, body).unwrap();
    }

    /// Fills the text and visual stores from the copied fixtures.
    pub fn build_stores(&self) {
        let mut docs: Vec<String> = fs::read_dir(self.path("kb"))
            .unwrap()
            .map(|e| format!("kb/{}", e.unwrap().file_name().to_string_lossy()))
            .collect();
        docs.sort();
        let mut args = vec!["--config", "config.toml", "ingest-kb"];
        args.extend(docs.iter().map(String::as_str));
        let o = curbsight(self, &args);
        assert!(o.status.success(), "ingest-kb failed: {}", String::from_utf8_lossy(&o.stderr));
        let o = curbsight(self, &["--config", "config.toml", "index-exemplars", "exemplars/annotations.json", "panos"]);
        assert!(o.status.success(), "index-exemplars failed: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if name == "golden" || name == "stores" {
            continue;
        }
        let target = to.join(&name);
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A scratch copy of the fixtures directory, without goldens or stores.
pub fn copy_fixtures() -> Workspace {
    let ws = Workspace::new();
    copy_tree(&fixtures_dir(), ws.root());
    ws
}

/// Runs the binary inside the workspace with a clean environment.
pub fn curbsight(ws: &Workspace, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curbsight"))
        .current_dir(ws.root())
        .args(args)
        .env_remove("CURBSIGHT_CONFIG")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const CITY_IMAGES: u64 = 12;

/// Ground truth for one city: every class appears in several images and
/// every annotation carries a full attribute set.
fn city_gt(schema: &AttributeSchema, rng: &mut ChaCha8Rng) -> Value {
    let cats = &schema.categories()[..10];
    let mut annotations = Vec::new();
    let mut id = 1;
    for image in 1..=CITY_IMAGES {
        for (c, cat) in cats.iter().enumerate() {
            if rng.gen_bool(0.4) && image > 2 {
                continue;
            }
            let w = rng.gen_range(20.0..120.0f64).round();
            let h = rng.gen_range(20.0..120.0f64).round();
            let x = rng.gen_range(0.0..(1800.0 - w)).round();
            let y = rng.gen_range(0.0..(900.0 - h)).round();
            let attrs: serde_json::Map<String, Value> = cat
                .attributes
                .iter()
                .map(|a| (a.name.clone(), json!(a.allowed_values[rng.gen_range(0..a.allowed_values.len())])))
                .collect();
            annotations.push(json!({
                "id": id, "image_id": image, "category_id": c + 1,
                "bbox": [x, y, w, h], "attributes": attrs,
            }));
            id += 1;
        }
    }
    json!({
        "images": (1..=CITY_IMAGES)
            .map(|i| json!({"id": i, "file_name": format!("img_{i:03}.jpg"), "width": 1920, "height": 1080}))
            .collect::<Vec<_>>(),
        "categories": cats.iter().enumerate().map(|(i, c)| json!({"id": i + 1, "name": c.name})).collect::<Vec<_>>(),
        "annotations": annotations,
    })
}

/// COCO results for `gt`: each object is found with probability `hit`,
/// boxes are jittered by up to `jitter` of their size, and some false
/// positives are added.
fn city_preds(gt: &Value, rng: &mut ChaCha8Rng, hit: f64, jitter: f64) -> Value {
    let mut out = Vec::new();
    for a in gt["annotations"].as_array().unwrap() {
        if !rng.gen_bool(hit) {
            continue;
        }
        let b: Vec<f64> = a["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let dx = rng.gen_range(-jitter..jitter) * b[2];
        let dy = rng.gen_range(-jitter..jitter) * b[3];
        out.push(json!({
            "image_id": a["image_id"], "category_id": a["category_id"],
            "bbox": [b[0] + dx, b[1] + dy, b[2], b[3]], "score": rng.gen_range(0.3..1.0),
        }));
    }
    for _ in 0..15 {
        out.push(json!({
            "image_id": rng.gen_range(1..=CITY_IMAGES), "category_id": rng.gen_range(1..=10),
            "bbox": [rng.gen_range(0.0..1700.0), rng.gen_range(0.0..800.0), 50.0, 50.0], "score": rng.gen_range(0.0..0.6),
        }));
    }
    Value::Array(out)
}

/// Records predicted on the ground-truth crops, with some attributes wrong.
fn city_attributes(gt: &Value, schema: &AttributeSchema, rng: &mut ChaCha8Rng) -> String {
    let names: Vec<&str> = gt["categories"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    let mut out = String::new();
    for a in gt["annotations"].as_array().unwrap() {
        let cat = schema.category(names[a["category_id"].as_u64().unwrap() as usize - 1]).unwrap();
        let b: Vec<f64> = a["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let attributes: Vec<Value> = cat
            .attributes
            .iter()
            .map(|def| {
                let truth = a["attributes"][&def.name].as_str().unwrap();
                let value =
                    if rng.gen_bool(0.75) { truth } else { &def.allowed_values[rng.gen_range(0..def.allowed_values.len())] };
                json!({"name": def.name, "value": value, "confidence": 0.8})
            })
            .collect();
        let record = json!({
            "object_id": format!("ann-{}", a["id"]), "category": cat.name,
            "bbox": {"x_min": b[0], "y_min": b[1], "x_max": b[0] + b[2], "y_max": b[1] + b[3]},
            "attributes": attributes, "source_image": format!("img_{:03}", a["image_id"].as_u64().unwrap()), "status": "ok",
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

/// Writes two synthetic cities and a configuration `eval.toml` with four
/// tagged runs: Alpha→Alpha, Alpha→Beta, Beta→Beta, Beta→Alpha.
pub fn write_synthetic_cities(ws: &Workspace, seed: u64) {
    let schema = AttributeSchema::default_roadside();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = String::from("[evaluation]\n");
    for city in ["Alpha", "Beta"] {
        let gt = city_gt(&schema, &mut rng);
        ws.write(&format!("{city}/gt.json"), &serde_json::to_string_pretty(&gt).unwrap());
        ws.write(&format!("{city}/attributes.records.jsonl"), &city_attributes(&gt, &schema, &mut rng));
        for train in ["Alpha", "Beta"] {
            let (hit, jitter) = if train == city { (0.9, 0.05) } else { (0.6, 0.25) };
            ws.write(&format!("{city}/pred_from_{train}.json"), &city_preds(&gt, &mut rng, hit, jitter).to_string());
        }
    }
    for (train, test) in [("Alpha", "Alpha"), ("Alpha", "Beta"), ("Beta", "Beta"), ("Beta", "Alpha")] {
        config.push_str(&format!(
            "\n[[evaluation.runs]]\nlabel = \"{train}->{test}\"\ngt = \"{test}/gt.json\"\npred = \"{test}/pred_from_{train}.json\"\ntrain_city = \"{train}\"\ntest_city = \"{test}\"\n"
        ));
        if train == test {
            config.push_str(&format!("attributes = \"{test}/attributes.records.jsonl\"\n"));
        }
    }
    ws.write("eval.toml", &config);
}
