//! The two retrieval stores: standards text chunks and attribute-annotated
//! visual exemplars.
//!
//! Search is exact and exhaustive. Hits are ordered by cosine score
//! descending, ties by id ascending, so results are reproducible across
//! runs and platforms.
//!
//! On disk a store is one JSON header line followed by one JSON line per
//! entry:
//!
//! ```text
//! {"format":"curbsight-vector-store","version":1,"modality":"text","dim":256,"count":2}
//! {"chunk_id":"gb5768.md#0","source_doc":"gb5768.md",...,"embedding":[0.01,...]}
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clients::{ImageEmbedder, ImageRef, TextEmbedder};
use crate::coco::CocoDataset;
use crate::error::{Error, Result};
use crate::geometry::crop;
use crate::numerics::{cosine_f32, norm_f32, Vector};
use crate::schema::AttributeSchema;

pub const STORE_FORMAT: &str = "curbsight-vector-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        })
    }
}

/// What a store holds besides the embedding.
pub trait Payload: Clone + Serialize + DeserializeOwned + Send + Sync {
    const MODALITY: Modality;
    fn id(&self) -> &str;
    fn check(&self) -> std::result::Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextChunk {
    pub chunk_id: String,
    pub source_doc: String,
    /// Section heading and character range within the source.
    pub locator: String,
    pub body: String,
}

impl Payload for TextChunk {
    const MODALITY: Modality = Modality::Text;

    fn id(&self) -> &str {
        &self.chunk_id
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.body.trim().is_empty() {
            return Err(format!("chunk {} has an empty body", self.chunk_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePair {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualExemplar {
    pub exemplar_id: String,
    pub image_ref: String,
    pub category: String,
    pub attributes: Vec<AttributePair>,
}

impl Payload for VisualExemplar {
    const MODALITY: Modality = Modality::Visual;

    fn id(&self) -> &str {
        &self.exemplar_id
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.category.trim().is_empty() {
            return Err(format!("exemplar {} has no category", self.exemplar_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub id: String,
    pub score: f64,
    /// Position of the entry in its store.
    #[serde(skip)]
    pub index: usize,
}

#[derive(Debug, Clone)]
struct Entry<T> {
    payload: T,
    embedding: Vec<f32>,
    norm: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    modality: Modality,
    dim: usize,
    count: usize,
}

#[derive(Serialize)]
struct StoredEntryRef<'a, T> {
    #[serde(flatten)]
    payload: &'a T,
    embedding: &'a [f32],
}

#[derive(Deserialize)]
struct StoredEntry<T> {
    #[serde(flatten)]
    payload: T,
    embedding: Vec<f32>,
}

/// An in-memory vector store with unique ids and a fixed dimension.
///
/// Embeddings are kept in single precision; scores are computed in double.
#[derive(Debug, Clone)]
pub struct VectorStore<T> {
    dim: usize,
    entries: Vec<Entry<T>>,
    ids: HashMap<String, usize>,
}

pub type TextStore = VectorStore<TextChunk>;
pub type VisualStore = VectorStore<VisualExemplar>;

impl<T: Payload> VectorStore<T> {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Store("store dimension must be positive".into()));
        }
        Ok(Self { dim, entries: Vec::new(), ids: HashMap::new() })
    }

    pub fn modality(&self) -> Modality {
        T::MODALITY
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn payloads(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().map(|e| &e.payload)
    }

    pub fn payload(&self, index: usize) -> &T {
        &self.entries[index].payload
    }

    pub fn get(&self, id: &str) -> Option<&T> {
        self.ids.get(id).map(|&i| &self.entries[i].payload)
    }

    pub fn embedding(&self, id: &str) -> Option<&[f32]> {
        self.ids.get(id).map(|&i| self.entries[i].embedding.as_slice())
    }

    fn make_entry(&self, payload: T, embedding: Vec<f32>) -> Result<Entry<T>> {
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: embedding.len() });
        }
        payload.check().map_err(Error::Store)?;
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Store(format!("entry {} has a non-finite embedding", payload.id())));
        }
        let norm = norm_f32(&embedding);
        if norm == 0.0 {
            return Err(Error::Store(format!("entry {} has a zero embedding", payload.id())));
        }
        Ok(Entry { payload, embedding, norm })
    }

    /// Adds an entry; the id must be new.
    pub fn insert(&mut self, payload: T, embedding: &Vector) -> Result<()> {
        if self.ids.contains_key(payload.id()) {
            return Err(Error::Store(format!("duplicate id '{}'", payload.id())));
        }
        self.push(self.make_entry(payload, embedding.to_f32())?);
        Ok(())
    }

    /// Adds an entry, replacing any existing entry with the same id in place.
    pub fn upsert(&mut self, payload: T, embedding: &Vector) -> Result<()> {
        let entry = self.make_entry(payload, embedding.to_f32())?;
        match self.ids.get(entry.payload.id()) {
            Some(&i) => self.entries[i] = entry,
            None => self.push(entry),
        }
        Ok(())
    }

    fn push(&mut self, entry: Entry<T>) {
        self.ids.insert(entry.payload.id().to_string(), self.entries.len());
        self.entries.push(entry);
    }

    /// Removes every entry matching `pred`, returning how many were removed.
    pub fn remove_where(&mut self, pred: impl Fn(&T) -> bool) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| !pred(&e.payload));
        self.reindex();
        before - self.entries.len()
    }

    fn reindex(&mut self) {
        self.ids = self.entries.iter().enumerate().map(|(i, e)| (e.payload.id().to_string(), i)).collect();
    }

    /// Adds all entries of `other`; entries with existing ids are replaced.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: other.dim });
        }
        for e in &other.entries {
            match self.ids.get(e.payload.id()) {
                Some(&i) => self.entries[i] = e.clone(),
                None => self.push(e.clone()),
            }
        }
        Ok(())
    }

    /// Top-`k` entries among those accepted by `filter`.
    pub fn search(&self, query: &Vector, k: usize, filter: impl Fn(&T) -> bool + Sync) -> Result<Vec<RetrievalHit>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.dim() });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = query.as_slice();
        let qn = crate::numerics::norm(query);
        if qn == 0.0 {
            return Err(Error::Numeric("query vector has zero norm".into()));
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .par_iter()
            .enumerate()
            .filter(|(_, e)| filter(&e.payload))
            .map(|(i, e)| (cosine_f32(q, qn, &e.embedding, e.norm), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| self.entries[a.1].payload.id().cmp(self.entries[b.1].payload.id()))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, index)| RetrievalHit { id: self.entries[index].payload.id().to_string(), score, index })
            .collect())
    }

    /// Writes the store atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(&tmp)?);
            let header = Header {
                format: STORE_FORMAT.into(),
                version: STORE_VERSION,
                modality: T::MODALITY,
                dim: self.dim,
                count: self.entries.len(),
            };
            serde_json::to_writer(&mut out, &header)?;
            out.write_all(b"\n")?;
            for e in &self.entries {
                serde_json::to_writer(&mut out, &StoredEntryRef { payload: &e.payload, embedding: &e.embedding })?;
                out.write_all(b"\n")?;
            }
            out.into_inner().map_err(|e| e.into_error())?.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::CorruptStore { path: path.display().to_string(), message };
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(corrupt("file is empty".into())),
        };
        let header: Header = serde_json::from_str(&header_line).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.format != STORE_FORMAT {
            return Err(corrupt(format!("unknown format '{}'", header.format)));
        }
        if header.version != STORE_VERSION {
            return Err(corrupt(format!("unsupported version {}", header.version)));
        }
        if header.modality != T::MODALITY {
            return Err(corrupt(format!("expected a {} store, found {}", T::MODALITY, header.modality)));
        }
        let mut store = Self::new(header.dim).map_err(|e| corrupt(e.to_string()))?;
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let stored: StoredEntry<T> =
                serde_json::from_str(&line).map_err(|e| corrupt(format!("entry {}: {e}", n + 1)))?;
            if store.ids.contains_key(stored.payload.id()) {
                return Err(corrupt(format!("duplicate id '{}'", stored.payload.id())));
            }
            let entry = store
                .make_entry(stored.payload, stored.embedding)
                .map_err(|e| corrupt(format!("entry {}: {e}", n + 1)))?;
            store.push(entry);
        }
        if store.len() != header.count {
            return Err(corrupt(format!("header says {} entries, found {}", header.count, store.len())));
        }
        Ok(store)
    }

    /// Loads `path` when it exists, otherwise returns an empty store.
    pub fn load_or_new(path: &Path, dim: usize) -> Result<Self> {
        if path.exists() {
            let s = Self::load(path)?;
            if s.dim != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: s.dim });
            }
            Ok(s)
        } else {
            Self::new(dim)
        }
    }
}

/// Ranks the text store against `query`.
pub fn query_text(store: &TextStore, query: &Vector, k: usize) -> Result<Vec<RetrievalHit>> {
    store.search(query, k, |_| true)
}

/// Ranks the exemplar store against `query`, optionally restricted to the
/// schema category `category_filter` (names and aliases both resolve).
pub fn query_visual(
    store: &VisualStore,
    query: &Vector,
    m: usize,
    category_filter: Option<&str>,
    schema: &AttributeSchema,
) -> Result<Vec<RetrievalHit>> {
    match category_filter {
        None => store.search(query, m, |_| true),
        Some(label) => {
            let name = &schema
                .category(label)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown filter category '{label}'")))?
                .name;
            store.search(query, m, |e| &e.category == name)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkingConfig {
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    #[serde(default = "default_overlap")]
    pub overlap_chars: usize,
}

fn default_max_chars() -> usize {
    512
}

fn default_overlap() -> usize {
    64
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { max_chars: default_max_chars(), overlap_chars: default_overlap() }
    }
}

/// A chunk's character range `[start, end)` and text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ';' | '。' | '！' | '？' | '；')
}

/// Splits `body` into windows of at most `max_chars` characters, each
/// starting `overlap_chars` before the previous one ended.
///
/// Within a window the split goes after the last blank line, failing that
/// after the last sentence end, failing that at the window edge. Splits are
/// never placed in the first half of a window so chunks stay reasonably
/// sized.
pub fn chunk_document(body: &str, max_chars: usize, overlap_chars: usize) -> Result<Vec<Span>> {
    if body.is_empty() {
        return Err(Error::InvalidArgument("cannot chunk an empty document".into()));
    }
    if max_chars <= overlap_chars {
        return Err(Error::InvalidArgument(format!(
            "max_chars ({max_chars}) must exceed overlap_chars ({overlap_chars})"
        )));
    }
    let chars: Vec<char> = body.chars().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        if n - start <= max_chars {
            spans.push(Span { start, end: n, text: chars[start..n].iter().collect() });
            break;
        }
        let hard = start + max_chars;
        let earliest = (start + overlap_chars + 1).max(start + max_chars / 2);
        let paragraph = (earliest..=hard).rev().find(|&p| p >= 2 && chars[p - 1] == '\n' && chars[p - 2] == '\n');
        let sentence = || {
            (earliest..=hard).rev().find(|&p| {
                let c = chars[p - 1];
                is_sentence_end(c) && (c > '\u{2fff}' || p == n || chars[p].is_whitespace())
            })
        };
        let end = paragraph.or_else(sentence).unwrap_or(hard);
        spans.push(Span { start, end, text: chars[start..end].iter().collect() });
        start = end - overlap_chars;
    }
    Ok(spans)
}

/// The nearest Markdown heading at or before character `pos`.
fn heading_before(body: &str, pos: usize) -> Option<String> {
    let mut offset = 0;
    let mut found = None;
    for line in body.split_inclusive('\n') {
        if offset > pos {
            break;
        }
        let t = line.trim();
        if t.starts_with('#') {
            let h = t.trim_start_matches('#').trim();
            if !h.is_empty() {
                found = Some(h.to_string());
            }
        }
        offset += line.chars().count();
    }
    found
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub docs: usize,
    pub chunks: usize,
    /// Chunks removed because their document was re-ingested.
    pub replaced: usize,
}

/// Chunks, embeds and stores each document. Re-ingesting a document with
/// the same file name replaces its chunks.
pub fn ingest_documents(
    paths: &[PathBuf],
    embedder: &dyn TextEmbedder,
    store: &mut TextStore,
    chunking: ChunkingConfig,
) -> Result<IngestReport> {
    if embedder.dim() != store.dim() {
        return Err(Error::DimensionMismatch { expected: store.dim(), actual: embedder.dim() });
    }
    let mut report = IngestReport::default();
    for path in paths {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let source_doc = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
        let spans = chunk_document(&body, chunking.max_chars, chunking.overlap_chars)
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        let chunks: Vec<TextChunk> = spans
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.text.trim().is_empty())
            .map(|(i, s)| {
                let range = format!("chars {}-{}", s.start, s.end);
                let locator = match heading_before(&body, s.start) {
                    Some(h) => format!("{h}; {range}"),
                    None => range,
                };
                TextChunk { chunk_id: format!("{source_doc}#{i}"), source_doc: source_doc.clone(), locator, body: s.text.clone() }
            })
            .collect();
        let embeddings: Vec<Vector> = chunks.par_iter().map(|c| embedder.embed_text(&c.body)).collect::<Result<_>>()?;
        report.replaced += store.remove_where(|c| c.source_doc == source_doc);
        for (chunk, emb) in chunks.into_iter().zip(&embeddings) {
            store.insert(chunk, emb)?;
        }
        report.docs += 1;
        report.chunks += embeddings.len();
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub annotation_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IndexReport {
    pub exemplars: usize,
    pub skipped: Vec<Skipped>,
}

/// Embeds the padded crop of every annotated object and stores it with its
/// attributes. Annotations whose category is not in the schema, or whose
/// image is missing, are skipped and listed in the report.
pub fn index_exemplars(
    annotations: &CocoDataset,
    images_root: &Path,
    embedder: &dyn ImageEmbedder,
    store: &mut VisualStore,
    schema: &AttributeSchema,
    pad_fraction: f64,
) -> Result<IndexReport> {
    if embedder.dim() != store.dim() {
        return Err(Error::DimensionMismatch { expected: store.dim(), actual: embedder.dim() });
    }
    let groups: Vec<_> = annotations.annotations_by_image().into_iter().collect();
    let per_image: Vec<Vec<std::result::Result<(VisualExemplar, Vector), Skipped>>> = groups
        .par_iter()
        .map(|(image_id, anns)| {
            let skip_all = |reason: String| {
                anns.iter().map(|a| Err(Skipped { annotation_id: a.id, reason: reason.clone() })).collect()
            };
            let Some(info) = annotations.image(*image_id) else {
                return skip_all(format!("unknown image id {image_id}"));
            };
            let path = images_root.join(&info.file_name);
            let raster = match image::open(&path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => return skip_all(format!("cannot read image {}: {e}", path.display())),
            };
            anns.iter()
                .map(|a| {
                    let skip = |reason: String| Skipped { annotation_id: a.id, reason };
                    let cat_name = annotations
                        .category(a.category_id)
                        .map(|c| c.name.as_str())
                        .ok_or_else(|| skip(format!("unknown category id {}", a.category_id)))?;
                    let category = schema
                        .category(cat_name)
                        .ok_or_else(|| skip(format!("category '{cat_name}' is not in the schema")))?;
                    let bbox = a.bounding_box().map_err(|e| skip(e.to_string()))?;
                    let patch = crop(&raster, &bbox, pad_fraction).map_err(|e| skip(e.to_string()))?;
                    let id = format!("ann-{}", a.id);
                    let emb = embedder
                        .embed_image(ImageRef { id: &id, raster: &patch })
                        .map_err(|e| skip(e.to_string()))?;
                    let attributes = a
                        .attribute_pairs()
                        .into_iter()
                        .map(|(name, value)| AttributePair { name, value })
                        .collect();
                    Ok((
                        VisualExemplar { exemplar_id: id, image_ref: info.file_name.clone(), category: category.name.clone(), attributes },
                        emb,
                    ))
                })
                .collect()
        })
        .collect();
    let mut report = IndexReport::default();
    for item in per_image.into_iter().flatten() {
        match item {
            Ok((exemplar, emb)) => {
                store.upsert(exemplar, &emb)?;
                report.exemplars += 1;
            }
            Err(skip) => {
                tracing::warn!(annotation = skip.annotation_id, "skipped: {}", skip.reason);
                report.skipped.push(skip);
            }
        }
    }
    report.skipped.sort_by_key(|s| s.annotation_id);
    Ok(report)
}
