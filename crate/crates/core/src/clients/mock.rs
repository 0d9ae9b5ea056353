//! Deterministic offline stand-ins for the neural services.
//!
//! Outputs depend only on input bytes and fixture files, never on time,
//! thread scheduling or platform, so pipeline goldens are reproducible.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{finish_embedding, Detector, ImageEmbedder, ImageRef, RawDetection, TextEmbedder, VisionLanguageModel, VlmRequest};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::Vector;
use crate::schema::{AttributeKind, AttributeSchema};

/// Prefix of the prompt line naming the object's category.
pub const CATEGORY_LINE_PREFIX: &str = "Object category:";

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Folds hashed string features into a signed bag-of-features vector.
fn fold_features<I: IntoIterator<Item = String>>(features: I, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for f in features {
        let h = fnv1a(f.as_bytes());
        let idx = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    v
}

fn text_features(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
    let mut feats = Vec::new();
    for t in &tokens {
        feats.push(format!("w:{t}"));
        let padded: Vec<char> = format!("^{t}$").chars().collect();
        for w in padded.windows(3) {
            feats.push(format!("c:{}", w.iter().collect::<String>()));
        }
    }
    for pair in tokens.windows(2) {
        feats.push(format!("b:{} {}", pair[0], pair[1]));
    }
    feats
}

/// Hashed bag-of-words/trigram text embedder.
#[derive(Debug, Clone)]
pub struct MockTextEmbedder {
    dim: usize,
}

impl MockTextEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }
}

impl TextEmbedder for MockTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vector> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        let mut v = fold_features(text_features(text), self.dim);
        if v.iter().all(|&x| x == 0.0) {
            v = fold_features([format!("raw:{text}")], self.dim);
        }
        finish_embedding(v, self.dim, "mock-text-embedder")
    }
}

/// Colour-layout image embedder: a 4×4 grid of quantized mean colours plus a
/// coarse colour histogram, hashed into `dim` buckets.
#[derive(Debug, Clone)]
pub struct MockImageEmbedder {
    dim: usize,
}

impl MockImageEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }
}

impl ImageEmbedder for MockImageEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: ImageRef<'_>) -> Result<Vector> {
        let img = image.raster;
        let (w, h) = (img.width() as u64, img.height() as u64);
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument("cannot embed an empty image".into()));
        }
        const GRID: u64 = 4;
        let mut cells = [[0u64; 4]; (GRID * GRID) as usize];
        let mut hist = [0u64; 64];
        for (x, y, p) in img.enumerate_pixels() {
            let cell = ((u64::from(y) * GRID / h) * GRID + u64::from(x) * GRID / w) as usize;
            for c in 0..3 {
                cells[cell][c] += u64::from(p[c]);
            }
            cells[cell][3] += 1;
            let bin = (usize::from(p[0]) >> 6) * 16 + (usize::from(p[1]) >> 6) * 4 + (usize::from(p[2]) >> 6);
            hist[bin] += 1;
        }
        let mut feats = Vec::new();
        for (i, c) in cells.iter().enumerate() {
            if c[3] == 0 {
                continue;
            }
            let q: Vec<u64> = (0..3).map(|k| c[k] / c[3] / 32).collect();
            // repeated so layout outweighs histogram noise
            for rep in 0..3 {
                feats.push(format!("g{i}:{}{}{}:{rep}", q[0], q[1], q[2]));
            }
        }
        let total = w * h;
        for (bin, &count) in hist.iter().enumerate() {
            let level = count * 8 / total;
            if count > 0 {
                feats.push(format!("h{bin}"));
                feats.push(format!("h{bin}:{level}"));
            }
        }
        finish_embedding(fold_features(feats, self.dim), self.dim, "mock-image-embedder")
    }
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureDetection {
    label: String,
    confidence: f64,
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum FixtureDetections {
    Hits(Vec<FixtureDetection>),
    /// A string value makes the detector fail for that image with the text
    /// as the error message.
    Failure(String),
}

/// Fixture-driven detector: image id → detections.
///
/// Ids without an entry return no detections.
#[derive(Debug, Clone, Default)]
pub struct MockDetector {
    fixtures: BTreeMap<String, FixtureDetections>,
}

impl MockDetector {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let fixtures = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        Ok(Self { fixtures })
    }
}

impl Detector for MockDetector {
    fn detect_raw(&self, image: ImageRef<'_>, vocabulary: &[String]) -> Result<Vec<RawDetection>> {
        if vocabulary.is_empty() {
            return Err(Error::InvalidArgument("detector vocabulary is empty".into()));
        }
        match self.fixtures.get(image.id) {
            None => Ok(Vec::new()),
            Some(FixtureDetections::Failure(msg)) => Err(Error::service("mock-detector", msg)),
            Some(FixtureDetections::Hits(hits)) => hits
                .iter()
                .map(|d| {
                    let [x0, y0, x1, y1] = d.bbox;
                    Ok(RawDetection {
                        label: d.label.clone(),
                        confidence: d.confidence,
                        bbox: BoundingBox::new(x0, y0, x1, y1)
                            .map_err(|e| Error::service("mock-detector", e))?,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MockVlmMode {
    /// JSON answer built from fixtures or derived from the crop.
    Template,
    /// Prose without any braces.
    Malformed,
    /// Returns the prompt verbatim.
    Echo,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ResponseStyle {
    Plain,
    #[default]
    Fenced,
    Prose,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum FixtureResponse {
    Raw { raw: String },
    Structured {
        category: String,
        attributes: Map<String, Value>,
        #[serde(default)]
        style: ResponseStyle,
    },
}

pub const MALFORMED_RESPONSE: &str =
    "I am sorry, but I cannot determine the attributes of this object from the provided image.";

/// Deterministic multimodal model.
///
/// In template mode the response for a crop comes from the fixture entry
/// keyed by the crop's image id. Crops without a fixture entry get values
/// chosen by hashing the crop pixels, for the category named on the
/// prompt's `Object category:` line.
#[derive(Debug, Clone)]
pub struct MockVlm {
    mode: MockVlmMode,
    schema: Arc<AttributeSchema>,
    fixtures: BTreeMap<String, FixtureResponse>,
}

impl MockVlm {
    pub fn new(mode: MockVlmMode, schema: Arc<AttributeSchema>) -> Self {
        Self { mode, schema, fixtures: BTreeMap::new() }
    }

    pub fn with_fixture_file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.fixtures = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(self)
    }

    pub fn with_fixture_json(mut self, text: &str) -> Result<Self> {
        self.fixtures = serde_json::from_str(text).map_err(|e| Error::parse("<vlm fixture>", e))?;
        Ok(self)
    }

    fn synthesize(&self, request: &VlmRequest<'_>) -> String {
        let crop = request.images[0];
        let category_label = request
            .prompt
            .lines()
            .find_map(|l| l.trim().strip_prefix(CATEGORY_LINE_PREFIX))
            .map(str::trim)
            .unwrap_or("unknown");
        let pixel_hash = fnv1a(crop.raster.as_raw());
        let mut attrs = Map::new();
        if let Some(cat) = self.schema.category(category_label) {
            for def in &cat.attributes {
                let h = fnv1a(format!("{pixel_hash:016x}/{}", def.name).as_bytes());
                let value = match def.kind {
                    AttributeKind::Enumerated => def.allowed_values[(h % def.allowed_values.len() as u64) as usize].clone(),
                    AttributeKind::FreeText => format!("observed-{:04x}", h & 0xffff),
                };
                let confidence = 0.55 + ((h >> 8) % 45) as f64 / 100.0;
                attrs.insert(def.name.clone(), json!({ "value": value, "confidence": round2(confidence) }));
            }
        }
        render(category_label, &attrs, ResponseStyle::Fenced)
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn render(category: &str, attributes: &Map<String, Value>, style: ResponseStyle) -> String {
    let body = json!({ "category": category, "attributes": attributes });
    match style {
        ResponseStyle::Plain => serde_json::to_string(&body).expect("json"),
        ResponseStyle::Fenced => format!(
            "Based on the image and the reference material, the attributes are:\n```json\n{}\n```",
            serde_json::to_string_pretty(&body).expect("json")
        ),
        ResponseStyle::Prose => format!(
            "After inspecting the crop I conclude {} and that is my final answer.",
            serde_json::to_string(&body).expect("json")
        ),
    }
}

impl VisionLanguageModel for MockVlm {
    fn complete(&self, request: &VlmRequest<'_>) -> Result<String> {
        request.check()?;
        Ok(match self.mode {
            MockVlmMode::Malformed => MALFORMED_RESPONSE.to_string(),
            MockVlmMode::Echo => request.prompt.to_string(),
            MockVlmMode::Template => match self.fixtures.get(request.images[0].id) {
                Some(FixtureResponse::Raw { raw }) => raw.clone(),
                Some(FixtureResponse::Structured { category, attributes, style }) => render(category, attributes, *style),
                None => self.synthesize(request),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use image::{Rgb, RgbImage};

    use super::*;
    use crate::numerics::{cosine_similarity, norm};

    #[test]
    fn text_embedder_is_deterministic_and_unit() {
        let e = MockTextEmbedder::new(64).unwrap();
        let a = e.embed_text("red circular sign").unwrap();
        assert_eq!(a, e.embed_text("red circular sign").unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        let b = e.embed_text("blue circular sign").unwrap();
        assert!(cosine_similarity(&a, &b).unwrap() < 1.0);
        assert!(cosine_similarity(&a, &b).unwrap() > 0.0);
        assert!((norm(&e.embed_text("...").unwrap()) - 1.0).abs() < 1e-12);
        assert!(e.embed_text("").is_err());
    }

    #[test]
    fn image_embedder_separates_colours() {
        let e = MockImageEmbedder::new(128).unwrap();
        let red = RgbImage::from_pixel(20, 20, Rgb([220, 10, 10]));
        let red2 = RgbImage::from_pixel(31, 17, Rgb([225, 12, 9]));
        let blue = RgbImage::from_pixel(20, 20, Rgb([10, 10, 220]));
        let r = e.embed_image(ImageRef { id: "a", raster: &red }).unwrap();
        let r2 = e.embed_image(ImageRef { id: "b", raster: &red2 }).unwrap();
        let b = e.embed_image(ImageRef { id: "c", raster: &blue }).unwrap();
        assert!(cosine_similarity(&r, &r2).unwrap() > cosine_similarity(&r, &b).unwrap());
        assert!((norm(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detector_fixture_lookup() {
        let d = MockDetector::from_json_str(
            r#"{"pano_001/v0": [{"label": "bollard", "confidence": 0.9, "bbox": [1, 2, 3, 4]}], "bad/v0": "boom"}"#,
            "t",
        )
        .unwrap();
        let img = RgbImage::new(4, 4);
        let vocab = vec!["bollard".to_string()];
        let hits = d.detect_raw(ImageRef { id: "pano_001/v0", raster: &img }, &vocab).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(d.detect_raw(ImageRef { id: "other", raster: &img }, &vocab).unwrap().is_empty());
        assert!(d.detect_raw(ImageRef { id: "bad/v0", raster: &img }, &vocab).is_err());
    }

    #[test]
    fn vlm_modes() {
        let schema = Arc::new(AttributeSchema::default_roadside());
        let img = RgbImage::from_pixel(8, 8, Rgb([1, 2, 3]));
        let prompt = format!("{CATEGORY_LINE_PREFIX} Fire Hydrant\nDescribe it.");
        let req = VlmRequest { system: None, prompt: &prompt, images: vec![ImageRef { id: "x", raster: &img }] };

        let t = MockVlm::new(MockVlmMode::Template, schema.clone()).complete(&req).unwrap();
        let rec = crate::schema::extract_and_repair(&t, &schema, "Fire Hydrant").unwrap();
        assert_eq!(rec.status, crate::schema::RecordStatus::Ok);
        assert_eq!(t, MockVlm::new(MockVlmMode::Template, schema.clone()).complete(&req).unwrap());

        let m = MockVlm::new(MockVlmMode::Malformed, schema.clone()).complete(&req).unwrap();
        assert!(!m.contains('{'));
        let e = MockVlm::new(MockVlmMode::Echo, schema.clone()).complete(&req).unwrap();
        assert_eq!(e, prompt);

        let empty = VlmRequest { system: None, prompt: "  ", images: vec![ImageRef { id: "x", raster: &img }] };
        assert!(MockVlm::new(MockVlmMode::Echo, schema).complete(&empty).is_err());
    }
}
