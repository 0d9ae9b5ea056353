//! Clients for the external neural services.
//!
//! Three service kinds are modelled as traits: an open-vocabulary
//! [`Detector`], a multimodal [`VisionLanguageModel`] and the
//! [`TextEmbedder`] / [`ImageEmbedder`] pair. Each has an HTTP
//! implementation in [`http`] and a deterministic offline implementation in
//! [`mock`].

pub mod http;
pub mod mock;
mod trace;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::Vector;
use crate::schema::AttributeSchema;

pub use trace::Tracer;

/// A raster plus the identifier services (and mocks) key on.
#[derive(Debug, Clone, Copy)]
pub struct ImageRef<'a> {
    pub id: &'a str,
    pub raster: &'a RgbImage,
}

/// One detector hit in the coordinate space of the image it was run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
    pub view_id: String,
}

/// Detector output before thresholding and label normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

pub trait Detector: Send + Sync {
    fn detect_raw(&self, image: ImageRef<'_>, vocabulary: &[String]) -> Result<Vec<RawDetection>>;
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vector>;
}

pub trait ImageEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: ImageRef<'_>) -> Result<Vector>;
}

/// A single multimodal completion request. Images are ordered: the object
/// crop first, then the wider context image.
#[derive(Debug, Clone)]
pub struct VlmRequest<'a> {
    pub system: Option<&'a str>,
    pub prompt: &'a str,
    pub images: Vec<ImageRef<'a>>,
}

impl VlmRequest<'_> {
    pub fn check(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("VLM prompt is empty".into()));
        }
        if self.images.is_empty() {
            return Err(Error::InvalidArgument("VLM request carries no image".into()));
        }
        Ok(())
    }
}

pub trait VisionLanguageModel: Send + Sync {
    fn complete(&self, request: &VlmRequest<'_>) -> Result<String>;
}

/// Runs the detector, drops hits below `conf_threshold` and rewrites labels
/// to canonical schema category names where the schema knows them.
/// Labels the schema does not know are passed through unchanged.
pub fn detect(
    detector: &dyn Detector,
    image: ImageRef<'_>,
    view_id: &str,
    vocabulary: &[String],
    conf_threshold: f64,
    schema: &AttributeSchema,
) -> Result<Vec<Detection>> {
    if vocabulary.is_empty() || vocabulary.iter().all(|v| v.trim().is_empty()) {
        return Err(Error::InvalidArgument("detector vocabulary is empty".into()));
    }
    let raw = detector.detect_raw(image, vocabulary)?;
    let mut out = Vec::with_capacity(raw.len());
    for d in raw {
        // NaN confidences fail this too.
        if d.confidence.is_nan() || d.confidence < conf_threshold {
            continue;
        }
        d.bbox.check().map_err(|e| Error::service("detector", format!("malformed box: {e}")))?;
        let label = schema.category(&d.label).map(|c| c.name.clone()).unwrap_or(d.label);
        if label.trim().is_empty() {
            return Err(Error::service("detector", "empty label in response"));
        }
        out.push(Detection { label, confidence: d.confidence, bbox: d.bbox, view_id: view_id.to_string() });
    }
    Ok(out)
}

/// Checks an embedding's dimension and rescales it to unit norm.
pub(crate) fn finish_embedding(values: Vec<f64>, dim: usize, service: &str) -> Result<Vector> {
    let v = Vector::new(values).map_err(|e| Error::service(service, e))?;
    if v.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, actual: v.dim() });
    }
    v.normalized().map_err(|e| Error::service(service, e))
}
