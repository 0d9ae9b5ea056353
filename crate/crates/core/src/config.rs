//! The single TOML configuration file.
//!
//! ```toml
//! [schema]
//! path = "schema.json"          # optional; the built-in schema otherwise
//!
//! [pipeline]
//! conf_threshold = 0.30
//! k = 3
//! m = 3
//! views = [{ id = "v0", yaw = 0, fov = 90, width = 512, height = 512 }]
//!
//! [stores]
//! text = "stores/text.store.jsonl"
//! visual = "stores/visual.store.jsonl"
//!
//! [services.detector]
//! backend = "http"
//! base_url = "http://localhost:8001"
//! model = "grounding-dino"
//!
//! [services.text_embedder]
//! backend = "mock"
//! dim = 256
//! ```
//!
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory holding the file. Secrets never live here: HTTP services read
//! their bearer token from the environment.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::http::{HttpDetector, HttpEmbedder, HttpVlm, ServiceEndpoint};
use crate::clients::mock::{MockDetector, MockImageEmbedder, MockTextEmbedder, MockVlm, MockVlmMode};
use crate::clients::Tracer;
use crate::error::{Error, Result};
use crate::pipeline::{PipelineConfig, Prompts, Services};
use crate::retrieval::{ChunkingConfig, TextStore, VisualStore};
use crate::schema::AttributeSchema;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_text_store() -> PathBuf {
    PathBuf::from("stores/text.store.jsonl")
}

fn default_visual_store() -> PathBuf {
    PathBuf::from("stores/visual.store.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoresSection {
    #[serde(default = "default_text_store")]
    pub text: PathBuf,
    #[serde(default = "default_visual_store")]
    pub visual: PathBuf,
}

impl Default for StoresSection {
    fn default() -> Self {
        Self { text: default_text_store(), visual: default_visual_store() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorService {
    /// Detections come from a fixture file keyed by `<image>/<view>`.
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixtures: Option<PathBuf>,
    },
    Http(ServiceEndpoint),
}

impl Default for DetectorService {
    fn default() -> Self {
        DetectorService::Mock { fixtures: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum VlmService {
    Mock {
        #[serde(default = "default_vlm_mode")]
        mode: MockVlmMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixtures: Option<PathBuf>,
    },
    Http(ServiceEndpoint),
}

fn default_vlm_mode() -> MockVlmMode {
    MockVlmMode::Template
}

impl Default for VlmService {
    fn default() -> Self {
        VlmService::Mock { mode: MockVlmMode::Template, fixtures: None }
    }
}

fn default_dim() -> usize {
    256
}

/// An HTTP embedding endpoint plus the dimension it returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_concurrency: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backoff_ms: Option<u64>,
    #[serde(default)]
    pub jitter_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_side: Option<u32>,
}

impl HttpEmbedderConfig {
    pub fn endpoint(&self) -> ServiceEndpoint {
        let mut e = ServiceEndpoint::new(self.base_url.clone(), self.model.clone());
        e.token_env = self.token_env.clone();
        if let Some(v) = self.timeout_secs {
            e.timeout_secs = v;
        }
        if let Some(v) = self.max_retries {
            e.max_retries = v;
        }
        if let Some(v) = self.max_concurrency {
            e.max_concurrency = v;
        }
        if let Some(v) = self.backoff_ms {
            e.backoff_ms = v;
        }
        e.jitter_seed = self.jitter_seed;
        e.max_image_side = self.max_image_side;
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderService {
    Mock {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http(HttpEmbedderConfig),
}

impl Default for EmbedderService {
    fn default() -> Self {
        EmbedderService::Mock { dim: default_dim() }
    }
}

impl EmbedderService {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderService::Mock { dim } => *dim,
            EmbedderService::Http(h) => h.dim,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServicesSection {
    #[serde(default)]
    pub detector: DetectorService,
    #[serde(default)]
    pub vlm: VlmService,
    #[serde(default)]
    pub text_embedder: EmbedderService,
    #[serde(default)]
    pub image_embedder: EmbedderService,
}

/// One dataset to score. City tags switch on the cross-city table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub label: String,
    pub gt: PathBuf,
    pub pred: PathBuf,
    /// Records predicted on ground-truth crops; defaults to `pred`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_city: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_city: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default)]
    pub novel_classes: Vec<String>,
    /// Also write `report.csv`.
    #[serde(default)]
    pub csv: bool,
    #[serde(default)]
    pub runs: Vec<EvalRun>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub schema: SchemaSection,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub prompts: Prompts,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub stores: StoresSection,
    #[serde(default)]
    pub services: ServicesSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

/// A parsed configuration with paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    /// SHA-256 of the effective settings (after overrides, before path
    /// resolution), as lowercase hex.
    pub hash: String,
    pub source: Option<PathBuf>,
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override. The value is read as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override key '{key}': '{p}' is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    /// Reads `path` (or starts from defaults when `None`) and applies
    /// `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let origin = path.map_or_else(|| "configuration".to_string(), |p| p.display().to_string());
        let mut config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.to_string().trim())))?;
        config.pipeline.check(&config.prompts)?;
        if config.chunking.max_chars <= config.chunking.overlap_chars {
            return Err(Error::Config("chunking.max_chars must exceed chunking.overlap_chars".into()));
        }
        let hash = hex::encode(Sha256::digest(serde_json::to_vec(&config).expect("config serializes")));
        let base = path.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        Ok(LoadedConfig { config, hash, source: path.map(Path::to_path_buf) })
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &mut self.schema.path {
            resolve(base, p);
        }
        resolve(base, &mut self.stores.text);
        resolve(base, &mut self.stores.visual);
        if let DetectorService::Mock { fixtures: Some(p) } = &mut self.services.detector {
            resolve(base, p);
        }
        if let VlmService::Mock { fixtures: Some(p), .. } = &mut self.services.vlm {
            resolve(base, p);
        }
        for r in &mut self.evaluation.runs {
            resolve(base, &mut r.gt);
            resolve(base, &mut r.pred);
            if let Some(a) = &mut r.attributes {
                resolve(base, a);
            }
        }
    }

    pub fn load_schema(&self) -> Result<AttributeSchema> {
        match &self.schema.path {
            Some(p) => AttributeSchema::load(p),
            None => Ok(AttributeSchema::default_roadside()),
        }
    }

    /// Loads both stores, or empty ones where the files do not exist yet.
    pub fn load_stores(&self) -> Result<(TextStore, VisualStore)> {
        let text = TextStore::load_or_new(&self.stores.text, self.services.text_embedder.dim())?;
        let visual = VisualStore::load_or_new(&self.stores.visual, self.services.image_embedder.dim())?;
        Ok((text, visual))
    }

    pub fn build_services(&self, schema: Arc<AttributeSchema>, tracer: Option<Arc<Tracer>>) -> Result<Services> {
        let detector: Arc<dyn crate::clients::Detector> = match &self.services.detector {
            DetectorService::Mock { fixtures: None } => Arc::new(MockDetector::default()),
            DetectorService::Mock { fixtures: Some(p) } => Arc::new(MockDetector::from_path(p)?),
            DetectorService::Http(e) => Arc::new(HttpDetector::new(e.clone(), tracer.clone())?),
        };
        let vlm: Arc<dyn crate::clients::VisionLanguageModel> = match &self.services.vlm {
            VlmService::Mock { mode, fixtures } => {
                let m = MockVlm::new(*mode, schema);
                Arc::new(match fixtures {
                    Some(p) => m.with_fixture_file(p)?,
                    None => m,
                })
            }
            VlmService::Http(e) => Arc::new(HttpVlm::new(e.clone(), tracer.clone())?),
        };
        let text_embedder: Arc<dyn crate::clients::TextEmbedder> = match &self.services.text_embedder {
            EmbedderService::Mock { dim } => Arc::new(MockTextEmbedder::new(*dim)?),
            EmbedderService::Http(h) => Arc::new(HttpEmbedder::new("text_embedder", h.endpoint(), h.dim, tracer.clone())?),
        };
        let image_embedder: Arc<dyn crate::clients::ImageEmbedder> = match &self.services.image_embedder {
            EmbedderService::Mock { dim } => Arc::new(MockImageEmbedder::new(*dim)?),
            EmbedderService::Http(h) => Arc::new(HttpEmbedder::new("image_embedder", h.endpoint(), h.dim, tracer)?),
        };
        Ok(Services { detector, vlm, text_embedder, image_embedder })
    }
}

/// SHA-256 of a file's bytes as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
