//! Pulls a structured record out of free-form model text.

use serde_json::{Map, Value};

use super::record::{AttributeValue, RecordStatus, StructuredObjectRecord};
use super::{match_key, AttributeSchema, CategoryDef, UNKNOWN_VALUE};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Confidence assigned when the model reports a value without one.
const ASSERTED_CONFIDENCE: f64 = 1.0;

/// Locates the first balanced `{ … }` block in `raw`.
///
/// Braces inside JSON string literals are ignored once a block has started.
/// A `{` that never closes is skipped and the search resumes after it.
pub fn find_json_block(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut from = 0;
    while let Some(off) = raw[from..].find('{') {
        let start = from + off;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&raw[start..=i]);
                    }
                }
                _ => {}
            }
        }
        from = start + 1;
    }
    None
}

/// Removes commas that directly precede `}` or `]`, outside strings.
fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_block(block: &str) -> Result<(Map<String, Value>, bool)> {
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(block) {
        return Ok((map, false));
    }
    let patched = strip_trailing_commas(&block.replace(['\u{201c}', '\u{201d}'], "\""));
    match serde_json::from_str::<Value>(&patched) {
        Ok(Value::Object(map)) => Ok((map, true)),
        Ok(_) => Err(Error::Extraction("brace block is not a JSON object".into())),
        Err(e) => Err(Error::Extraction(format!("brace block is not valid JSON: {e}"))),
    }
}

fn get_ci<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key).or_else(|| {
        let k = match_key(key);
        map.iter().find(|(name, _)| match_key(name) == k).map(|(_, v)| v)
    })
}

struct RawAttribute {
    name: String,
    value: Option<String>,
    confidence: Option<f64>,
    /// value or confidence needed coercion from a non-standard shape
    coerced: bool,
}

fn scalar_text(v: &Value) -> Option<(String, bool)> {
    match v {
        Value::String(s) => Some((s.clone(), false)),
        Value::Number(n) => Some((n.to_string(), true)),
        Value::Bool(b) => Some((if *b { "yes" } else { "no" }.to_string(), true)),
        _ => None,
    }
}

fn raw_attribute(name: &str, v: &Value) -> RawAttribute {
    let mut out = RawAttribute { name: name.to_string(), value: None, confidence: None, coerced: false };
    match v {
        Value::Object(inner) => {
            if let Some(val) = get_ci(inner, "value") {
                if let Some((text, coerced)) = scalar_text(val) {
                    out.value = Some(text);
                    out.coerced |= coerced;
                }
            }
            match get_ci(inner, "confidence") {
                Some(Value::Number(n)) => out.confidence = n.as_f64(),
                Some(Value::String(s)) => {
                    out.confidence = s.trim().parse().ok();
                    out.coerced = true;
                }
                _ => {}
            }
        }
        other => {
            if let Some((text, coerced)) = scalar_text(other) {
                out.value = Some(text);
                out.coerced |= coerced;
            }
        }
    }
    out
}

/// Collects attribute entries from any of the accepted layouts:
/// `{"attributes": {name: value | {value, confidence}}}`,
/// `{"attributes": [{name, value, confidence}]}`, or attribute keys placed
/// directly on the top-level object. Returns the entries and whether the
/// layout was non-standard.
fn collect_attributes(map: &Map<String, Value>, category: &CategoryDef) -> (Vec<RawAttribute>, bool) {
    match get_ci(map, "attributes") {
        Some(Value::Object(obj)) => (obj.iter().map(|(k, v)| raw_attribute(k, v)).collect(), false),
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            let mut odd = false;
            for item in items {
                match item {
                    Value::Object(o) => match get_ci(o, "name").and_then(Value::as_str) {
                        Some(name) => out.push(raw_attribute(name, item)),
                        None => odd = true,
                    },
                    _ => odd = true,
                }
            }
            (out, odd)
        }
        Some(_) => (Vec::new(), true),
        None => {
            let flat: Vec<RawAttribute> = map
                .iter()
                .filter(|(k, _)| category.attribute(k).is_some())
                .map(|(k, v)| raw_attribute(k, v))
                .collect();
            (flat, true)
        }
    }
}

fn parse_bbox(v: Option<&Value>) -> Option<BoundingBox> {
    let b: BoundingBox = serde_json::from_value(v?.clone()).ok()?;
    (b.is_finite() && b.y_min <= b.y_max).then_some(b)
}

/// Extracts, normalizes and completes a record from raw model output.
///
/// The first balanced brace block is parsed (trailing commas and curly
/// quotes are patched if needed). The category must be present. Values are
/// matched to the schema case-insensitively and through synonyms; attributes
/// the model skipped or answered outside the schema become
/// `"unknown"` at confidence 0. The returned status is
/// [`RecordStatus::RepairApplied`] when any of that was needed and
/// [`RecordStatus::Ok`] otherwise. Surrounding prose or code fences alone do
/// not count as a repair.
///
/// `expected_category` (the detector's label) wins over the model's
/// category; a disagreement is recorded as a repair.
pub fn extract_and_repair(
    raw: &str,
    schema: &AttributeSchema,
    expected_category: &str,
) -> Result<StructuredObjectRecord> {
    let category = schema
        .category(expected_category)
        .ok_or_else(|| Error::Extraction(format!("expected category '{expected_category}' is not in the schema")))?;
    let block = find_json_block(raw).ok_or_else(|| Error::Extraction("no balanced JSON object in model output".into()))?;
    let (map, mut repaired) = parse_block(block)?;

    let model_category = match get_ci(&map, "category") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return Err(Error::Extraction("JSON object has no category field".into())),
    };
    if model_category != category.name {
        repaired = true;
    }

    let (raw_attrs, odd_layout) = collect_attributes(&map, category);
    repaired |= odd_layout;

    let mut slots: Vec<Option<AttributeValue>> = vec![None; category.attributes.len()];
    for ra in raw_attrs {
        let Some(idx) = category.attributes.iter().position(|a| match_key(&a.name) == match_key(&ra.name)) else {
            repaired = true;
            continue;
        };
        if slots[idx].is_some() {
            repaired = true;
            continue;
        }
        let def = &category.attributes[idx];
        repaired |= ra.coerced || ra.name != def.name;

        let canonical = ra.value.as_deref().and_then(|v| def.canonicalize(v));
        let entry = match canonical {
            Some(value) => {
                if Some(value.as_str()) != ra.value.as_deref() {
                    repaired = true;
                }
                let confidence = match ra.confidence {
                    Some(c) if c.is_finite() => {
                        let clamped = c.clamp(0.0, 1.0);
                        repaired |= clamped != c;
                        clamped
                    }
                    _ => {
                        repaired = true;
                        ASSERTED_CONFIDENCE
                    }
                };
                AttributeValue::new(def.name.clone(), value, confidence)
            }
            None => {
                repaired = true;
                AttributeValue::new(def.name.clone(), UNKNOWN_VALUE, 0.0)
            }
        };
        slots[idx] = Some(entry);
    }

    let attributes = slots
        .into_iter()
        .zip(&category.attributes)
        .map(|(slot, def)| {
            slot.unwrap_or_else(|| {
                repaired = true;
                AttributeValue::new(def.name.clone(), UNKNOWN_VALUE, 0.0)
            })
        })
        .collect();

    let text_field = |key: &str| get_ci(&map, key).and_then(Value::as_str).map(str::to_string);
    let detection_confidence = match get_ci(&map, "detection_confidence") {
        Some(Value::Number(n)) => n.as_f64().map(|c| {
            let clamped = c.clamp(0.0, 1.0);
            repaired |= clamped != c;
            clamped
        }),
        _ => None,
    };

    Ok(StructuredObjectRecord {
        object_id: text_field("object_id").unwrap_or_default(),
        category: category.name.clone(),
        bbox: parse_bbox(get_ci(&map, "bbox")).unwrap_or(BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 0.0, y_max: 0.0 }),
        attributes,
        source_image: text_field("source_image").unwrap_or_default(),
        source_view: text_field("source_view"),
        detection_confidence,
        status: if repaired { RecordStatus::RepairApplied } else { RecordStatus::Ok },
    })
}
