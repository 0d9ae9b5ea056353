//! HTTP/JSON clients.
//!
//! The VLM and embedders speak the widely used chat-completions and
//! embeddings conventions (`POST {base}/chat/completions`,
//! `POST {base}/embeddings`). The detector uses a small custom contract:
//!
//! ```text
//! POST {base}/detect
//! { "model": "...", "image": "<base64 PNG>", "captions": ["traffic light", ...] }
//! → { "boxes": [[x_min, y_min, x_max, y_max], ...], "labels": [...], "scores": [...] }
//! ```
//!
//! Bearer tokens are read from the environment variable named in the
//! endpoint configuration at request time and never written to traces.

use std::io::Cursor;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use image::RgbImage;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{finish_embedding, Detector, ImageEmbedder, ImageRef, RawDetection, TextEmbedder, Tracer, VisionLanguageModel, VlmRequest};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::Vector;

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_concurrency() -> usize {
    4
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceEndpoint {
    pub base_url: String,
    #[serde(rename = "model")]
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Seed for backoff jitter; fixed seeds give reproducible retry timing.
    #[serde(default)]
    pub jitter_seed: u64,
    /// Images whose longer side exceeds this are downscaled before upload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_side: Option<u32>,
}

impl ServiceEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            token_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_concurrency: default_concurrency(),
            backoff_ms: default_backoff_ms(),
            jitter_seed: 0,
            max_image_side: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!("{}: timeout must be positive", self.base_url)));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config(format!("{}: max_concurrency must be at least 1", self.base_url)));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(Error::Config(format!("base_url must be http(s), got '{}'", self.base_url)));
        }
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Exponential backoff with deterministic jitter: attempt `n` (0-based)
/// waits `base·2ⁿ + jitter`, jitter ∈ `[0, base)` drawn from the seed.
pub fn backoff_delay(base_ms: u64, attempt: u32, seed: u64) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << attempt.min(16));
    let jitter = if base_ms == 0 { 0 } else { splitmix(seed ^ u64::from(attempt)) % base_ms };
    Duration::from_millis(exp.saturating_add(jitter))
}

pub fn default_token_env(service: &str) -> String {
    format!("CURBSIGHT_{}_TOKEN", service.to_uppercase().replace('-', "_"))
}

#[derive(Debug)]
struct HttpCore {
    service: &'static str,
    endpoint: ServiceEndpoint,
    client: Client,
    limiter: Limiter,
    tracer: Option<Arc<Tracer>>,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpCore {
    fn new(service: &'static str, endpoint: ServiceEndpoint, tracer: Option<Arc<Tracer>>) -> Result<Self> {
        endpoint.check()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::service(service, e))?;
        let limiter = Limiter::new(endpoint.max_concurrency);
        Ok(Self { service, endpoint, client, limiter, tracer })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    /// Without an explicit `token_env`, `CURBSIGHT_<SERVICE>_TOKEN` is used
    /// when set; otherwise requests go out unauthenticated.
    fn token(&self) -> Result<Option<String>> {
        match &self.endpoint.token_env {
            None => Ok(std::env::var(default_token_env(self.service)).ok()),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| Error::Config(format!("{}: environment variable {var} is not set", self.service))),
        }
    }

    fn try_once(&self, url: &str, body: &Value, token: Option<&str>) -> std::result::Result<Value, Attempt> {
        let mut req = self.client.post(url).json(body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::service(self.service, format!("HTTP {status}: {text}"))));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::service(self.service, format!("malformed response: {e}"))))
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx.
    fn post(&self, path: &str, body: &Value, trace_request: Value) -> Result<Value> {
        let url = self.url(path);
        let token = self.token()?;
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(self.endpoint.backoff_ms, attempt - 1, self.endpoint.jitter_seed));
            }
            match self.try_once(&url, body, token.as_deref()) {
                Ok(v) => {
                    if let Some(t) = &self.tracer {
                        t.record(self.service, trace_request, v.clone(), started.elapsed().as_millis());
                    }
                    return Ok(v);
                }
                Err(Attempt::Fatal(e)) => {
                    if let Some(t) = &self.tracer {
                        t.record(self.service, trace_request, json!({ "error": e.to_string() }), started.elapsed().as_millis());
                    }
                    return Err(e);
                }
                Err(Attempt::Retry(msg)) => {
                    tracing::debug!(service = self.service, attempt, "retryable failure: {msg}");
                    last = msg;
                }
            }
        }
        if let Some(t) = &self.tracer {
            t.record(self.service, trace_request, json!({ "error": last.clone() }), started.elapsed().as_millis());
        }
        Err(Error::service(
            self.service,
            format!("giving up after {} attempts: {last}", self.endpoint.max_retries + 1),
        ))
    }

    fn encode_image(&self, img: &RgbImage) -> Result<String> {
        let resized;
        let img = match self.endpoint.max_image_side {
            Some(max) if max > 0 && img.width().max(img.height()) > max => {
                let scale = f64::from(max) / f64::from(img.width().max(img.height()));
                let w = ((f64::from(img.width()) * scale).round() as u32).max(1);
                let h = ((f64::from(img.height()) * scale).round() as u32).max(1);
                resized = image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle);
                &resized
            }
            _ => img,
        };
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
    }
}

fn redacted_image(img: &ImageRef<'_>) -> Value {
    json!(format!("<image {} {}x{}>", img.id, img.raster.width(), img.raster.height()))
}

#[derive(Debug)]
pub struct HttpDetector {
    core: HttpCore,
}

impl HttpDetector {
    pub fn new(endpoint: ServiceEndpoint, tracer: Option<Arc<Tracer>>) -> Result<Self> {
        Ok(Self { core: HttpCore::new("detector", endpoint, tracer)? })
    }
}

#[derive(Deserialize)]
struct DetectResponse {
    boxes: Vec<[f64; 4]>,
    labels: Vec<String>,
    scores: Vec<f64>,
}

impl Detector for HttpDetector {
    fn detect_raw(&self, image: ImageRef<'_>, vocabulary: &[String]) -> Result<Vec<RawDetection>> {
        if vocabulary.is_empty() {
            return Err(Error::InvalidArgument("detector vocabulary is empty".into()));
        }
        let body = json!({
            "model": self.core.endpoint.model_name,
            "image": self.core.encode_image(image.raster)?,
            "captions": vocabulary,
        });
        let trace = json!({ "model": self.core.endpoint.model_name, "image": redacted_image(&image), "captions": vocabulary });
        let resp = self.core.post("detect", &body, trace)?;
        let parsed: DetectResponse =
            serde_json::from_value(resp).map_err(|e| Error::service("detector", format!("malformed response: {e}")))?;
        if parsed.boxes.len() != parsed.labels.len() || parsed.boxes.len() != parsed.scores.len() {
            return Err(Error::service(
                "detector",
                format!(
                    "malformed response: {} boxes, {} labels, {} scores",
                    parsed.boxes.len(),
                    parsed.labels.len(),
                    parsed.scores.len()
                ),
            ));
        }
        parsed
            .boxes
            .into_iter()
            .zip(parsed.labels)
            .zip(parsed.scores)
            .map(|((b, label), confidence)| {
                let bbox = BoundingBox::new(b[0], b[1], b[2], b[3])
                    .map_err(|e| Error::service("detector", format!("malformed response: {e}")))?;
                Ok(RawDetection { label, confidence, bbox })
            })
            .collect()
    }
}

/// Embeddings client; one instance serves either text or images.
#[derive(Debug)]
pub struct HttpEmbedder {
    core: HttpCore,
    dim: usize,
}

impl HttpEmbedder {
    /// `service` names the client in errors, traces and the default token
    /// variable, e.g. `"text_embedder"`.
    pub fn new(service: &'static str, endpoint: ServiceEndpoint, dim: usize, tracer: Option<Arc<Tracer>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { core: HttpCore::new(service, endpoint, tracer)?, dim })
    }

    fn embed(&self, input: Value, trace_input: Value) -> Result<Vector> {
        let body = json!({ "model": self.core.endpoint.model_name, "input": input, "encoding_format": "float" });
        let trace = json!({ "model": self.core.endpoint.model_name, "input": trace_input });
        let resp = self.core.post("embeddings", &body, trace)?;
        let values: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::service(self.core.service, "malformed response: missing data[0].embedding"))?;
        finish_embedding(values, self.dim, self.core.service)
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vector> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        self.embed(json!(text), json!(text))
    }
}

impl ImageEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: ImageRef<'_>) -> Result<Vector> {
        let url = format!("data:image/png;base64,{}", self.core.encode_image(image.raster)?);
        self.embed(json!(url), redacted_image(&image))
    }
}

#[derive(Debug)]
pub struct HttpVlm {
    core: HttpCore,
}

impl HttpVlm {
    pub fn new(endpoint: ServiceEndpoint, tracer: Option<Arc<Tracer>>) -> Result<Self> {
        Ok(Self { core: HttpCore::new("vlm", endpoint, tracer)? })
    }
}

fn chat_messages(request: &VlmRequest<'_>, image_part: impl Fn(&ImageRef<'_>) -> Result<Value>) -> Result<Vec<Value>> {
    let mut messages = Vec::new();
    if let Some(system) = request.system {
        messages.push(json!({ "role": "system", "content": system }));
    }
    let mut parts = Vec::new();
    for img in &request.images {
        parts.push(image_part(img)?);
    }
    parts.push(json!({ "type": "text", "text": request.prompt }));
    messages.push(json!({ "role": "user", "content": parts }));
    Ok(messages)
}

impl VisionLanguageModel for HttpVlm {
    fn complete(&self, request: &VlmRequest<'_>) -> Result<String> {
        request.check()?;
        let messages = chat_messages(request, |img| {
            let url = format!("data:image/png;base64,{}", self.core.encode_image(img.raster)?);
            Ok(json!({ "type": "image_url", "image_url": { "url": url } }))
        })?;
        let trace_messages = chat_messages(request, |img| Ok(json!({ "type": "image_url", "image_url": redacted_image(img) })))?;
        let body = json!({ "model": self.core.endpoint.model_name, "temperature": 0, "messages": messages });
        let trace = json!({ "model": self.core.endpoint.model_name, "messages": trace_messages });
        let resp = self.core.post("chat/completions", &body, trace)?;
        match resp.pointer("/choices/0/message/content") {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Array(parts)) => Ok(parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("")),
            _ => Err(Error::service("vlm", "malformed response: missing choices[0].message.content")),
        }
    }
}
