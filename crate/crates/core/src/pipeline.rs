//! Per-panorama and batch orchestration.
//!
//! A scene goes through: split into perspective views → detect per view →
//! map boxes to panorama space → per-category de-duplication → for each
//! surviving object, crop → visual and text retrieval → prompt assembly →
//! VLM → JSON extraction and validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clients::{detect, Detection, Detector, ImageEmbedder, ImageRef, TextEmbedder, Tracer, VisionLanguageModel, VlmRequest};
use crate::clients::mock::CATEGORY_LINE_PREFIX;
use crate::coco::{CocoAnnotation, CocoDataset};
use crate::error::{Error, Result};
use crate::eval::iou_pano;
use crate::geometry::{crop, render_view, view_bbox_to_pano, BoundingBox, EquirectImage, PerspectiveView};
use crate::retrieval::{query_text, query_visual, TextChunk, TextStore, VisualExemplar, VisualStore};
use crate::schema::{extract_and_repair, AttributeKind, AttributeSchema, CategoryDef, RecordStatus, StructuredObjectRecord};

/// Which image accompanies the crop as wider context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OriginalImage {
    #[default]
    Panorama,
    /// The perspective view the object was detected in.
    View,
}

fn default_views() -> Vec<PerspectiveView> {
    PerspectiveView::default_quad(2048)
}

fn default_conf() -> f64 {
    0.30
}

fn default_dedup() -> f64 {
    0.5
}

fn default_pad() -> f64 {
    0.10
}

fn default_k() -> usize {
    3
}

fn default_budget() -> usize {
    6000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_views")]
    pub views: Vec<PerspectiveView>,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
    #[serde(default = "default_dedup")]
    pub dedup_iou: f64,
    #[serde(default = "default_pad")]
    pub pad_fraction: f64,
    /// Text fragments retrieved per object.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Visual exemplars retrieved per object.
    #[serde(default = "default_k")]
    pub m: usize,
    /// Upper bound on prompt length in characters.
    #[serde(default = "default_budget")]
    pub context_char_budget: usize,
    /// Restrict exemplar search to the detected category.
    #[serde(default = "default_true")]
    pub category_filter_on_visual: bool,
    #[serde(default)]
    pub original_image: OriginalImage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            views: default_views(),
            conf_threshold: default_conf(),
            dedup_iou: default_dedup(),
            pad_fraction: default_pad(),
            k: default_k(),
            m: default_k(),
            context_char_budget: default_budget(),
            category_filter_on_visual: true,
            original_image: OriginalImage::Panorama,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self, prompts: &Prompts) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("pipeline.views is empty".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            v.check().map_err(|e| Error::Config(format!("pipeline.views[{i}]: {e}")))?;
            if self.views[..i].iter().any(|w| w.view_id == v.view_id) {
                return Err(Error::Config(format!("pipeline.views[{i}]: duplicate id '{}'", v.view_id)));
            }
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config(format!("pipeline.conf_threshold must lie in [0, 1], got {}", self.conf_threshold)));
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::Config(format!("pipeline.dedup_iou must lie in (0, 1], got {}", self.dedup_iou)));
        }
        if !(self.pad_fraction >= 0.0 && self.pad_fraction.is_finite()) {
            return Err(Error::Config(format!("pipeline.pad_fraction must be >= 0, got {}", self.pad_fraction)));
        }
        let fixed = prompts.instruction.chars().count() + FORMAT_CONTRACT.chars().count();
        if self.context_char_budget <= fixed {
            return Err(Error::Config(format!(
                "pipeline.context_char_budget ({}) must exceed the fixed prompt text ({fixed} characters)",
                self.context_char_budget
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompts {
    #[serde(default = "default_system")]
    pub system: String,
    /// Opening of every per-object prompt.
    #[serde(default = "default_instruction")]
    pub instruction: String,
    /// Opening of free-form question prompts.
    #[serde(default = "default_query_instruction")]
    pub query_instruction: String,
}

fn default_system() -> String {
    "You are an inspector of urban roadside infrastructure. You describe objects strictly within the attribute schema you are given.".into()
}

fn default_instruction() -> String {
    "The first image is a crop of one roadside object; the second image shows its surroundings. \
     Determine the value of every listed attribute. Use the reference standards and the annotated precedents as guidance, \
     but decide from what the image shows."
        .into()
}

fn default_query_instruction() -> String {
    "Answer the question about the image. Cite the reference standards where they apply.".into()
}

impl Default for Prompts {
    fn default() -> Self {
        Self { system: default_system(), instruction: default_instruction(), query_instruction: default_query_instruction() }
    }
}

pub const FORMAT_CONTRACT: &str = "Respond with a single JSON object and nothing else, in the form \
{\"category\": \"<category>\", \"attributes\": {\"<attribute>\": {\"value\": \"<allowed value>\", \"confidence\": <number from 0 to 1>}}}.";

pub const TRUNCATION_NOTE: &str = "(context truncated to fit the prompt budget)";

#[derive(Debug, Clone, PartialEq)]
pub struct TextHit {
    pub score: f64,
    pub chunk: TextChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarHit {
    pub score: f64,
    pub exemplar: VisualExemplar,
}

/// Everything the per-object prompt is built from. Hits are ordered by
/// score, highest first.
#[derive(Debug, Clone)]
pub struct SceneContext<'a> {
    pub category: &'a CategoryDef,
    pub text_hits: Vec<TextHit>,
    pub exemplars: Vec<ExemplarHit>,
}

fn schema_slice(category: &CategoryDef) -> String {
    let mut s = format!("{CATEGORY_LINE_PREFIX} {}\nAttributes (give exactly one value each; use \"unknown\" when it cannot be seen):\n", category.name);
    for a in &category.attributes {
        match a.kind {
            AttributeKind::Enumerated => s.push_str(&format!("- {}: {}\n", a.name, a.allowed_values.join(" | "))),
            AttributeKind::FreeText => s.push_str(&format!("- {}: free text\n", a.name)),
        }
    }
    s
}

fn render_prompt(instruction: &str, slice: &str, text: &[TextHit], exemplars: &[ExemplarHit], truncated: bool) -> String {
    let mut p = format!("{instruction}\n\n{slice}");
    if !text.is_empty() {
        p.push_str("\nReference standards:\n");
        for (i, h) in text.iter().enumerate() {
            p.push_str(&format!("[{}] {} ({})\n{}\n", i + 1, h.chunk.source_doc, h.chunk.locator, h.chunk.body.trim()));
        }
    }
    if !exemplars.is_empty() {
        p.push_str("\nAnnotated precedents (similar objects labeled by inspectors):\n");
        for (i, h) in exemplars.iter().enumerate() {
            let attrs: Vec<String> = h.exemplar.attributes.iter().map(|a| format!("{}={}", a.name, a.value)).collect();
            p.push_str(&format!("[P{}] {}: {} (similarity {:.3})\n", i + 1, h.exemplar.category, attrs.join("; "), h.score));
        }
    }
    if truncated {
        p.push_str(&format!("\n{TRUNCATION_NOTE}\n"));
    }
    p.push('\n');
    p.push_str(FORMAT_CONTRACT);
    p
}

/// Builds the per-object prompt: instruction and schema slice, numbered
/// standards fragments, exemplar payloads, then the output contract.
///
/// Over budget, the lowest-scoring text fragments go first, then the
/// lowest-scoring exemplars; the schema slice is never dropped.
pub fn assemble_context(ctx: &SceneContext<'_>, prompts: &Prompts, budget: usize) -> Result<String> {
    let slice = schema_slice(ctx.category);
    let mut text = ctx.text_hits.clone();
    let mut exemplars = ctx.exemplars.clone();
    let full = render_prompt(&prompts.instruction, &slice, &text, &exemplars, false);
    if full.chars().count() <= budget {
        return Ok(full);
    }
    loop {
        if !text.is_empty() {
            text.pop();
        } else if !exemplars.is_empty() {
            exemplars.pop();
        } else {
            return Err(Error::InvalidArgument(format!(
                "context budget of {budget} characters cannot hold the schema slice for {}",
                ctx.category.name
            )));
        }
        let p = render_prompt(&prompts.instruction, &slice, &text, &exemplars, true);
        if p.chars().count() <= budget {
            return Ok(p);
        }
    }
}

/// Greedy per-category suppression in panorama space: detections are
/// visited by confidence (ties keep input order) and kept when their IoU
/// with every kept detection of the same label is below `iou_threshold`.
/// Returns the indices of kept detections in visiting order.
pub fn dedup_indices(dets: &[Detection], iou_threshold: f64, pano_width: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let clash = kept
            .iter()
            .any(|&k| dets[k].label == dets[i].label && iou_pano(&dets[k].bbox, &dets[i].bbox, pano_width) >= iou_threshold);
        if !clash {
            kept.push(i);
        }
    }
    kept
}

pub fn dedup_detections(dets: &[Detection], iou_threshold: f64, pano_width: f64) -> Vec<Detection> {
    dedup_indices(dets, iou_threshold, pano_width).into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Clone)]
pub struct Services {
    pub detector: Arc<dyn Detector>,
    pub vlm: Arc<dyn VisionLanguageModel>,
    pub text_embedder: Arc<dyn TextEmbedder>,
    pub image_embedder: Arc<dyn ImageEmbedder>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneStats {
    pub views: usize,
    pub view_failures: usize,
    /// Detections above the confidence threshold, over all views.
    pub detections: usize,
    /// Detections whose label is not a schema category.
    pub unmapped: usize,
    pub dedup_dropped: usize,
    pub records: usize,
    pub ok: usize,
    pub repaired: usize,
    pub invalid: usize,
}

impl SceneStats {
    fn add(&mut self, o: &SceneStats) {
        self.views += o.views;
        self.view_failures += o.view_failures;
        self.detections += o.detections;
        self.unmapped += o.unmapped;
        self.dedup_dropped += o.dedup_dropped;
        self.records += o.records;
        self.ok += o.ok;
        self.repaired += o.repaired;
        self.invalid += o.invalid;
    }

    fn count(&mut self, status: RecordStatus) {
        self.records += 1;
        match status {
            RecordStatus::Ok => self.ok += 1,
            RecordStatus::RepairApplied => self.repaired += 1,
            RecordStatus::Invalid => self.invalid += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneResult {
    pub image_id: String,
    pub records: Vec<StructuredObjectRecord>,
    pub stats: SceneStats,
    pub elapsed_ms: u128,
}

/// A panorama (or, in ground-truth mode, any image) to process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchInput {
    pub image_id: String,
    pub path: PathBuf,
}

#[derive(Debug)]
pub struct SceneOutcome {
    pub input: BatchInput,
    pub result: std::result::Result<SceneResult, String>,
}

#[derive(Debug)]
pub struct BatchOutput {
    pub scenes: Vec<SceneOutcome>,
}

impl BatchOutput {
    /// All records as JSON Lines, in input order.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.scenes {
            if let Ok(r) = &s.result {
                for rec in &r.records {
                    out.push_str(&rec.to_json_line());
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn totals(&self) -> SceneStats {
        let mut t = SceneStats::default();
        for s in &self.scenes {
            if let Ok(r) = &s.result {
                t.add(&r.stats);
            }
        }
        t
    }

    pub fn failed_images(&self) -> usize {
        self.scenes.iter().filter(|s| s.result.is_err()).count()
    }

    /// True when any image failed or any record is invalid.
    pub fn has_failures(&self) -> bool {
        self.failed_images() > 0 || self.totals().invalid > 0
    }

    pub fn manifest(&self, meta: ManifestMeta) -> Manifest {
        let images = self
            .scenes
            .iter()
            .map(|s| {
                let file = s.input.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                match &s.result {
                    Ok(r) => ManifestImage {
                        image_id: s.input.image_id.clone(),
                        file,
                        status: if r.stats.invalid > 0 || r.stats.view_failures > 0 { "partial" } else { "ok" }.into(),
                        error: None,
                        stats: Some(r.stats),
                    },
                    Err(e) => ManifestImage {
                        image_id: s.input.image_id.clone(),
                        file,
                        status: "failed".into(),
                        error: Some(e.clone()),
                        stats: None,
                    },
                }
            })
            .collect();
        Manifest {
            tool: "curbsight".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: meta.config_hash,
            schema_version: meta.schema_version,
            records_file: meta.records_file,
            stores: meta.stores,
            images,
            totals: self.totals(),
            failed_images: self.failed_images(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreInfo {
    pub modality: String,
    pub path: Option<String>,
    pub sha256: Option<String>,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMeta {
    pub config_hash: String,
    pub schema_version: String,
    pub records_file: String,
    pub stores: Vec<StoreInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub file: String,
    /// `ok`, `partial` (some records invalid or views failed) or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<SceneStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub schema_version: String,
    pub records_file: String,
    pub stores: Vec<StoreInfo>,
    pub images: Vec<ManifestImage>,
    pub totals: SceneStats,
    pub failed_images: usize,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Deserialize)]
struct ImageMetadata {
    image_id: Option<String>,
}

/// Image files directly inside `dir`, sorted by name. The image id is the
/// file stem unless a sidecar `<stem>.json` supplies an `image_id`.
pub fn list_inputs(dir: &Path) -> Result<Vec<BatchInput>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let sidecar = path.with_extension("json");
            let image_id = if sidecar.is_file() {
                let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
                let meta: ImageMetadata =
                    serde_json::from_str(&text).map_err(|e| Error::parse(sidecar.display().to_string(), e))?;
                meta.image_id.unwrap_or(stem)
            } else {
                stem
            };
            Ok(BatchInput { image_id, path })
        })
        .collect()
}

/// Everything needed to annotate scenes.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub prompts: Prompts,
    pub schema: Arc<AttributeSchema>,
    pub text_store: TextStore,
    pub visual_store: VisualStore,
    pub services: Services,
    pub tracer: Option<Arc<Tracer>>,
}

struct Located {
    det: Detection,
    view_bbox: BoundingBox,
    view_index: usize,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        prompts: Prompts,
        schema: Arc<AttributeSchema>,
        text_store: TextStore,
        visual_store: VisualStore,
        services: Services,
    ) -> Result<Self> {
        config.check(&prompts)?;
        if services.text_embedder.dim() != text_store.dim() {
            return Err(Error::DimensionMismatch { expected: text_store.dim(), actual: services.text_embedder.dim() });
        }
        if services.image_embedder.dim() != visual_store.dim() {
            return Err(Error::DimensionMismatch { expected: visual_store.dim(), actual: services.image_embedder.dim() });
        }
        Ok(Self { config, prompts, schema, text_store, visual_store, services, tracer: None })
    }

    pub fn with_tracer(mut self, tracer: Option<Arc<Tracer>>) -> Self {
        self.tracer = tracer;
        self
    }

    fn vocabulary(&self) -> Vec<String> {
        self.schema.categories().iter().map(|c| c.name.to_lowercase()).collect()
    }

    /// Annotates one panorama.
    pub fn run_scene(&self, pano: &EquirectImage) -> Result<SceneResult> {
        let started = Instant::now();
        let frame = pano.frame();
        let vocab = self.vocabulary();
        let views = &self.config.views;
        let per_view: Vec<Result<(RgbImage, Vec<Detection>)>> = views
            .par_iter()
            .map(|v| {
                let raster = render_view(pano, v)?;
                let id = format!("{}/{}", pano.image_id, v.view_id);
                let dets = detect(
                    self.services.detector.as_ref(),
                    ImageRef { id: &id, raster: &raster },
                    &v.view_id,
                    &vocab,
                    self.config.conf_threshold,
                    &self.schema,
                )?;
                Ok((raster, dets))
            })
            .collect();

        let mut stats = SceneStats { views: views.len(), ..Default::default() };
        let mut rasters: Vec<Option<RgbImage>> = Vec::with_capacity(views.len());
        let mut located = Vec::new();
        let mut last_error = None;
        for (vi, r) in per_view.into_iter().enumerate() {
            match r {
                Ok((raster, dets)) => {
                    for d in dets {
                        stats.detections += 1;
                        if self.schema.category(&d.label).is_none() {
                            stats.unmapped += 1;
                            continue;
                        }
                        let pano_bbox = view_bbox_to_pano(&views[vi], &d.bbox, frame)?;
                        located.push(Located { view_bbox: d.bbox, det: Detection { bbox: pano_bbox, ..d }, view_index: vi });
                    }
                    rasters.push(Some(raster));
                }
                Err(e) => {
                    tracing::warn!(image = %pano.image_id, view = %views[vi].view_id, "detection failed: {e}");
                    stats.view_failures += 1;
                    last_error = Some(e);
                    rasters.push(None);
                }
            }
        }
        if stats.view_failures == views.len() {
            return Err(last_error.expect("at least one view"));
        }

        let dets: Vec<Detection> = located.iter().map(|l| l.det.clone()).collect();
        let keep = dedup_indices(&dets, self.config.dedup_iou, f64::from(frame.width));
        stats.dedup_dropped = located.len() - keep.len();

        let mut records = Vec::with_capacity(keep.len());
        for (n, &i) in keep.iter().enumerate() {
            let l = &located[i];
            let view_raster = rasters[l.view_index].as_ref().expect("detections come from rendered views");
            let object_id = format!("{}-{n:03}", pano.image_id);
            let original = match self.config.original_image {
                OriginalImage::Panorama => ImageRef { id: &pano.image_id, raster: pano.raster() },
                OriginalImage::View => ImageRef { id: &views[l.view_index].view_id, raster: view_raster },
            };
            let target = Target {
                object_id: &object_id,
                label: &l.det.label,
                bbox: l.det.bbox,
                source_image: &pano.image_id,
                source_view: Some(&l.det.view_id),
                detection_confidence: Some(l.det.confidence),
            };
            let rec = self.describe(&target, view_raster, &l.view_bbox, original);
            stats.count(rec.status);
            records.push(rec);
        }
        Ok(SceneResult { image_id: pano.image_id.clone(), records, stats, elapsed_ms: started.elapsed().as_millis() })
    }

    /// Runs the attribute stage for one object; any failure yields an
    /// invalid record instead of an error.
    fn describe(&self, target: &Target<'_>, source: &RgbImage, crop_box: &BoundingBox, original: ImageRef<'_>) -> StructuredObjectRecord {
        match self.try_describe(target, source, crop_box, original) {
            Ok(rec) => rec,
            Err(e) => {
                tracing::warn!(object = target.object_id, "attribute stage failed: {e}");
                StructuredObjectRecord {
                    object_id: target.object_id.to_string(),
                    category: self.schema.category(target.label).map_or_else(|| target.label.to_string(), |c| c.name.clone()),
                    bbox: target.bbox,
                    attributes: Vec::new(),
                    source_image: target.source_image.to_string(),
                    source_view: target.source_view.map(str::to_string),
                    detection_confidence: target.detection_confidence,
                    status: RecordStatus::Invalid,
                }
            }
        }
    }

    fn try_describe(&self, target: &Target<'_>, source: &RgbImage, crop_box: &BoundingBox, original: ImageRef<'_>) -> Result<StructuredObjectRecord> {
        let category = self
            .schema
            .category(target.label)
            .ok_or_else(|| Error::Extraction(format!("label '{}' is not a schema category", target.label)))?;
        let patch = crop(source, crop_box, self.config.pad_fraction)?;
        let crop_ref = ImageRef { id: target.object_id, raster: &patch };
        let ctx = self.retrieve(category, crop_ref)?;
        let prompt = assemble_context(&ctx, &self.prompts, self.config.context_char_budget)?;
        let request = VlmRequest { system: Some(&self.prompts.system), prompt: &prompt, images: vec![crop_ref, original] };
        let started = Instant::now();
        let raw = self.services.vlm.complete(&request);
        if let Some(t) = &self.tracer {
            let response = match &raw {
                Ok(s) => json!(s),
                Err(e) => json!({ "error": e.to_string() }),
            };
            let req = json!({
                "object_id": target.object_id,
                "images": [crop_ref.id, original.id],
                "system": self.prompts.system,
                "prompt": prompt,
            });
            t.record("pipeline.vlm", req, response, started.elapsed().as_millis());
        }
        let mut rec = extract_and_repair(&raw?, &self.schema, &category.name)?;
        rec.object_id = target.object_id.to_string();
        rec.bbox = target.bbox;
        rec.source_image = target.source_image.to_string();
        rec.source_view = target.source_view.map(str::to_string);
        rec.detection_confidence = target.detection_confidence;
        let report = self.schema.validate_record(&rec);
        if !report.valid {
            let first = report.violations.first().map(|v| v.message.clone()).unwrap_or_default();
            return Err(Error::Extraction(format!("record failed validation: {first}")));
        }
        Ok(rec)
    }

    /// Visual and text retrieval for one object.
    pub fn retrieve<'s>(&self, category: &'s CategoryDef, crop: ImageRef<'_>) -> Result<SceneContext<'s>> {
        let mut exemplars = Vec::new();
        if self.config.m > 0 && !self.visual_store.is_empty() {
            let q = self.services.image_embedder.embed_image(crop)?;
            let filter = self.config.category_filter_on_visual.then_some(category.name.as_str());
            exemplars = query_visual(&self.visual_store, &q, self.config.m, filter, &self.schema)?
                .into_iter()
                .map(|h| ExemplarHit { score: h.score, exemplar: self.visual_store.payload(h.index).clone() })
                .collect();
        }
        let mut text_hits = Vec::new();
        if self.config.k > 0 && !self.text_store.is_empty() {
            let names: Vec<&str> = category.attribute_names().collect();
            let query = format!("{}: {}", category.name, names.join(", "));
            let q = self.services.text_embedder.embed_text(&query)?;
            text_hits = query_text(&self.text_store, &q, self.config.k)?
                .into_iter()
                .map(|h| TextHit { score: h.score, chunk: self.text_store.payload(h.index).clone() })
                .collect();
        }
        Ok(SceneContext { category, text_hits, exemplars })
    }

    /// Annotates every input; results keep input order whatever the
    /// scheduling. `jobs == 0` uses all cores.
    pub fn run_batch(&self, inputs: &[BatchInput], jobs: usize) -> Result<BatchOutput> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("no images to annotate".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let scenes = pool.install(|| {
            inputs
                .par_iter()
                .map(|input| {
                    let result = EquirectImage::open(input.image_id.clone(), &input.path)
                        .and_then(|pano| self.run_scene(&pano))
                        .map_err(|e| {
                            tracing::error!(image = %input.image_id, "scene failed: {e}");
                            e.to_string()
                        });
                    SceneOutcome { input: input.clone(), result }
                })
                .collect()
        });
        Ok(BatchOutput { scenes })
    }

    /// Attribute stage on ground-truth boxes: every annotation is cropped
    /// from its image and described under its ground-truth category. Record
    /// ids are `ann-<annotation id>`.
    pub fn run_gt_crops(&self, gt: &CocoDataset, images_root: &Path, jobs: usize) -> Result<BatchOutput> {
        let groups: Vec<_> = gt.annotations_by_image().into_iter().collect();
        if groups.is_empty() {
            return Err(Error::InvalidArgument("ground truth has no annotations".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let scenes = pool.install(|| {
            groups
                .par_iter()
                .map(|(image_id, anns)| {
                    let info = gt.image(*image_id).expect("checked on load");
                    let input = BatchInput { image_id: info.stem().to_string(), path: images_root.join(&info.file_name) };
                    let result = self.describe_gt_image(gt, &input, anns).map_err(|e| {
                        tracing::error!(image = %input.image_id, "image failed: {e}");
                        e.to_string()
                    });
                    SceneOutcome { input, result }
                })
                .collect()
        });
        Ok(BatchOutput { scenes })
    }

    fn describe_gt_image(&self, gt: &CocoDataset, input: &BatchInput, anns: &[&CocoAnnotation]) -> Result<SceneResult> {
        let started = Instant::now();
        let raster = image::open(&input.path).map_err(|e| Error::Image(format!("{}: {e}", input.path.display())))?.to_rgb8();
        let mut stats = SceneStats { views: 1, ..Default::default() };
        let mut records = Vec::with_capacity(anns.len());
        for a in anns {
            stats.detections += 1;
            let object_id = format!("ann-{}", a.id);
            let label = gt.category(a.category_id).expect("checked on load").name.clone();
            let bbox = a.bounding_box()?;
            let target = Target {
                object_id: &object_id,
                label: &label,
                bbox,
                source_image: &input.image_id,
                source_view: None,
                detection_confidence: None,
            };
            let original = ImageRef { id: &input.image_id, raster: &raster };
            let rec = self.describe(&target, &raster, &bbox, original);
            stats.count(rec.status);
            records.push(rec);
        }
        Ok(SceneResult { image_id: input.image_id.clone(), records, stats, elapsed_ms: started.elapsed().as_millis() })
    }

    /// One-shot question about an image, answered with standards context.
    /// Returns the model's raw text.
    pub fn answer_query(&self, image: ImageRef<'_>, question: &str) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::InvalidArgument("question is empty".into()));
        }
        let mut prompt = format!("{}\n\nQuestion: {}\n", self.prompts.query_instruction, question.trim());
        if self.config.k > 0 && !self.text_store.is_empty() {
            let q = self.services.text_embedder.embed_text(question)?;
            let hits = query_text(&self.text_store, &q, self.config.k)?;
            prompt.push_str("\nReference standards:\n");
            for (i, h) in hits.iter().enumerate() {
                let c = self.text_store.payload(h.index);
                prompt.push_str(&format!("[{}] {} ({})\n{}\n", i + 1, c.source_doc, c.locator, c.body.trim()));
            }
        }
        let request = VlmRequest { system: Some(&self.prompts.system), prompt: &prompt, images: vec![image] };
        let started = Instant::now();
        let answer = self.services.vlm.complete(&request);
        if let Some(t) = &self.tracer {
            let response = match &answer {
                Ok(s) => json!(s),
                Err(e) => json!({ "error": e.to_string() }),
            };
            t.record("pipeline.query", json!({ "image": image.id, "prompt": prompt }), response, started.elapsed().as_millis());
        }
        answer
    }
}

struct Target<'a> {
    object_id: &'a str,
    label: &'a str,
    bbox: BoundingBox,
    source_image: &'a str,
    source_view: Option<&'a str>,
    detection_confidence: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::AttributePair;

    fn det(label: &str, conf: f64, b: [f64; 4]) -> Detection {
        Detection { label: label.into(), confidence: conf, bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(), view_id: "v0".into() }
    }

    #[test]
    fn dedup_fixtures() {
        let same = [det("Bollard", 0.7, [0.0, 0.0, 10.0, 10.0]), det("Bollard", 0.9, [0.0, 0.0, 10.0, 10.0])];
        let kept = dedup_detections(&same, 0.5, 1000.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let cross = [det("Bollard", 0.7, [0.0, 0.0, 10.0, 10.0]), det("Trash Bin", 0.9, [0.0, 0.0, 10.0, 10.0])];
        assert_eq!(dedup_detections(&cross, 0.5, 1000.0).len(), 2);

        // 7x10 overlap of two 10x10 boxes shifted by 3 → 70 / 130 ≈ 0.538; shifted by 4.2857 → 0.4.
        let shift = 60.0 / 14.0;
        let pair = [det("Bollard", 0.9, [0.0, 0.0, 10.0, 10.0]), det("Bollard", 0.8, [shift, 0.0, 10.0 + shift, 10.0])];
        let iou = crate::eval::iou(&pair[0].bbox, &pair[1].bbox).unwrap();
        assert!((iou - 0.4).abs() < 1e-12);
        assert_eq!(dedup_detections(&pair, 0.5, 1000.0).len(), 2);
    }

    #[test]
    fn dedup_across_the_seam() {
        let a = Detection { bbox: BoundingBox { x_min: 995.0, y_min: 0.0, x_max: 5.0, y_max: 10.0 }, ..det("Bollard", 0.9, [0.0, 0.0, 1.0, 1.0]) };
        let b = Detection { bbox: BoundingBox { x_min: 995.0, y_min: 0.0, x_max: 5.0, y_max: 10.0 }, ..det("Bollard", 0.8, [0.0, 0.0, 1.0, 1.0]) };
        assert_eq!(dedup_detections(&[a, b], 0.5, 1000.0).len(), 1);
    }

    fn chunk(id: &str, body: &str) -> TextHit {
        TextHit {
            score: 0.0,
            chunk: TextChunk { chunk_id: id.into(), source_doc: "std.md".into(), locator: format!("loc {id}"), body: body.into() },
        }
    }

    fn exemplar(id: &str) -> ExemplarHit {
        ExemplarHit {
            score: 0.8,
            exemplar: VisualExemplar {
                exemplar_id: id.into(),
                image_ref: "x.png".into(),
                category: "Traffic Sign".into(),
                attributes: vec![AttributePair { name: "Type".into(), value: "warning".into() }],
            },
        }
    }

    #[test]
    fn context_without_retrieval() {
        let schema = AttributeSchema::default_roadside();
        let cat = schema.category("Traffic Sign").unwrap();
        let ctx = SceneContext { category: cat, text_hits: vec![], exemplars: vec![] };
        let p = assemble_context(&ctx, &Prompts::default(), 6000).unwrap();
        assert!(p.starts_with(&Prompts::default().instruction));
        assert!(p.contains("Object category: Traffic Sign"));
        assert!(p.ends_with(FORMAT_CONTRACT));
        assert!(!p.contains("Reference standards:") && !p.contains("Annotated precedents"));
    }

    #[test]
    fn context_order_and_truncation() {
        let schema = AttributeSchema::default_roadside();
        let cat = schema.category("Traffic Sign").unwrap();
        let mut hi = chunk("a", &"Mandatory signs are blue discs. ".repeat(4));
        hi.score = 0.9;
        let mut lo = chunk("b", &"Warning signs are yellow triangles. ".repeat(4));
        lo.score = 0.5;
        let ctx = SceneContext { category: cat, text_hits: vec![hi.clone(), lo.clone()], exemplars: vec![exemplar("e1")] };
        let p = assemble_context(&ctx, &Prompts::default(), 6000).unwrap();
        let (i_hi, i_lo) = (p.find("Mandatory signs").unwrap(), p.find("Warning signs").unwrap());
        let i_slice = p.find("Object category").unwrap();
        let i_ex = p.find("[P1]").unwrap();
        let i_fmt = p.find(FORMAT_CONTRACT).unwrap();
        assert!(i_slice < i_hi && i_hi < i_lo && i_lo < i_ex && i_ex < i_fmt);
        assert!(!p.contains(TRUNCATION_NOTE));

        let full = p.chars().count();
        let lo_len = render_prompt(&Prompts::default().instruction, &schema_slice(cat), &[hi.clone()], &ctx.exemplars, true).chars().count();
        assert!(lo_len < full);
        let t = assemble_context(&ctx, &Prompts::default(), lo_len).unwrap();
        assert!(t.contains("Mandatory signs") && !t.contains("Warning signs"));
        assert!(t.contains("[P1]") && t.contains(TRUNCATION_NOTE));

        assert!(assemble_context(&ctx, &Prompts::default(), 100).is_err());
    }
}
