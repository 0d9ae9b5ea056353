//! Attribute schema registry.
//!
//! The schema file is the single source of truth for which categories exist,
//! which attributes each category carries and which values those attributes
//! may take. Everything downstream (prompting, repair, validation,
//! evaluation) reads it from here.

mod record;
mod repair;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use record::{AttributeValue, RecordStatus, StructuredObjectRecord, ValidationReport, Violation, ViolationCode};
pub use repair::{extract_and_repair, find_json_block};

/// Value written for attributes the model did not report.
pub const UNKNOWN_VALUE: &str = "unknown";

const DEFAULT_SCHEMA: &str = include_str!("../../data/default_schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeKind {
    Enumerated,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDef {
    pub name: String,
    pub kind: AttributeKind,
    #[serde(default)]
    pub allowed_values: Vec<String>,
    /// alias → canonical allowed value
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
}

impl AttributeDef {
    /// Maps free-form model text onto an allowed value.
    ///
    /// Matching ignores case, surrounding whitespace, underscores and
    /// repeated spaces; synonyms are consulted after direct matches.
    /// [`UNKNOWN_VALUE`] is accepted for every attribute. Free-text
    /// attributes accept any non-empty string, trimmed.
    pub fn canonicalize(&self, raw: &str) -> Option<String> {
        let key = match_key(raw);
        if key.is_empty() {
            return None;
        }
        if key == UNKNOWN_VALUE {
            return Some(UNKNOWN_VALUE.to_string());
        }
        match self.kind {
            AttributeKind::FreeText => Some(raw.trim().to_string()),
            AttributeKind::Enumerated => {
                if let Some(v) = self.allowed_values.iter().find(|v| match_key(v) == key) {
                    return Some(v.clone());
                }
                self.synonyms
                    .iter()
                    .find(|(alias, _)| match_key(alias) == key)
                    .map(|(_, target)| target.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDef {
    pub name: String,
    /// Alternative labels (detector phrases, table names) for this category.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub attributes: Vec<AttributeDef>,
}

impl CategoryDef {
    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        let key = match_key(name);
        self.attributes.iter().find(|a| match_key(&a.name) == key)
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
    categories: Vec<CategoryDef>,
}

/// Loaded, validated schema. Immutable after construction.
#[derive(Debug, Clone)]
pub struct AttributeSchema {
    pub version: String,
    pub notes: Option<String>,
    categories: Vec<CategoryDef>,
    lookup: HashMap<String, usize>,
}

impl PartialEq for AttributeSchema {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.categories == other.categories
    }
}

impl AttributeSchema {
    /// The ten-category roadside schema shipped with the crate.
    pub fn default_roadside() -> Self {
        Self::from_json_str(DEFAULT_SCHEMA, "<built-in schema>").expect("built-in schema is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::parse(origin, "empty schema document"));
        }
        let file: SchemaFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        Self::from_parts(file.version, file.notes, file.categories)
    }

    pub fn from_parts(version: String, notes: Option<String>, categories: Vec<CategoryDef>) -> Result<Self> {
        let mut lookup = HashMap::new();
        if categories.is_empty() {
            return Err(schema_err("categories", "schema defines no categories"));
        }
        for (ci, cat) in categories.iter().enumerate() {
            let cpath = format!("categories[{ci}]");
            if cat.name.trim().is_empty() {
                return Err(schema_err(&cpath, "empty category name"));
            }
            for label in std::iter::once(&cat.name).chain(&cat.aliases) {
                if let Some(prev) = lookup.insert(match_key(label), ci) {
                    let what = if *label == cat.name { "category" } else { "category alias" };
                    return Err(schema_err(
                        &format!("{cpath}.name"),
                        format!("duplicate {what} '{label}' (already used by categories[{prev}])"),
                    ));
                }
            }
            if cat.attributes.is_empty() {
                return Err(schema_err(&cpath, format!("category '{}' has no attributes", cat.name)));
            }
            let mut seen = HashMap::new();
            for (ai, attr) in cat.attributes.iter().enumerate() {
                let apath = format!("{cpath}.attributes[{ai}]");
                if let Some(prev) = seen.insert(match_key(&attr.name), ai) {
                    return Err(schema_err(
                        &apath,
                        format!("duplicate attribute '{}' (already at index {prev})", attr.name),
                    ));
                }
                check_attribute(attr, &apath)?;
            }
        }
        Ok(Self { version, notes, categories, lookup })
    }

    pub fn categories(&self) -> &[CategoryDef] {
        &self.categories
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    /// Case-insensitive lookup by name or alias.
    pub fn category(&self, label: &str) -> Option<&CategoryDef> {
        self.lookup.get(&match_key(label)).map(|&i| &self.categories[i])
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.lookup.get(&match_key(label)).copied()
    }

    pub fn to_json_pretty(&self) -> String {
        let file = SchemaFile {
            version: self.version.clone(),
            notes: self.notes.clone(),
            categories: self.categories.clone(),
        };
        serde_json::to_string_pretty(&file).expect("schema serializes")
    }

    /// Checks a record against the schema, listing every violation.
    pub fn validate_record(&self, record: &StructuredObjectRecord) -> ValidationReport {
        record::validate(self, record)
    }

    /// Rewrites category and attribute values into canonical spelling.
    /// Returns whether anything changed.
    pub fn canonicalize_record(&self, record: &mut StructuredObjectRecord) -> bool {
        record::canonicalize(self, record)
    }
}

fn check_attribute(attr: &AttributeDef, path: &str) -> Result<()> {
    if attr.name.trim().is_empty() {
        return Err(schema_err(path, "empty attribute name"));
    }
    match attr.kind {
        AttributeKind::FreeText => {
            if !attr.allowed_values.is_empty() {
                return Err(schema_err(
                    &format!("{path}.allowed_values"),
                    format!("free-text attribute '{}' must not list allowed values", attr.name),
                ));
            }
            if !attr.synonyms.is_empty() {
                return Err(schema_err(
                    &format!("{path}.synonyms"),
                    format!("free-text attribute '{}' cannot declare synonyms", attr.name),
                ));
            }
        }
        AttributeKind::Enumerated => {
            if attr.allowed_values.len() < 2 {
                return Err(schema_err(
                    &format!("{path}.allowed_values"),
                    format!("enumerated attribute '{}' needs at least two values", attr.name),
                ));
            }
            let mut seen = HashMap::new();
            for (vi, v) in attr.allowed_values.iter().enumerate() {
                let key = match_key(v);
                if key.is_empty() {
                    return Err(schema_err(&format!("{path}.allowed_values[{vi}]"), "empty value"));
                }
                if seen.insert(key, vi).is_some() {
                    return Err(schema_err(
                        &format!("{path}.allowed_values[{vi}]"),
                        format!("duplicate value '{v}'"),
                    ));
                }
            }
            for (alias, target) in &attr.synonyms {
                if !attr.allowed_values.iter().any(|v| v == target) {
                    return Err(schema_err(
                        &format!("{path}.synonyms.{alias}"),
                        format!("synonym targets unknown value '{target}'"),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn schema_err(path: &str, message: impl Into<String>) -> Error {
    Error::Schema { path: path.to_string(), message: message.into() }
}

/// Normalized comparison key: lowercase, `_` → space, whitespace collapsed.
pub(crate) fn match_key(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}
