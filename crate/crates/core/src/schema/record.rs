use serde::{Deserialize, Serialize};

use super::{match_key, AttributeSchema};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    RepairApplied,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeValue {
    pub name: String,
    pub value: String,
    pub confidence: f64,
}

impl AttributeValue {
    pub fn new(name: impl Into<String>, value: impl Into<String>, confidence: f64) -> Self {
        Self { name: name.into(), value: value.into(), confidence }
    }
}

/// One detected asset with its schema-conformant attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredObjectRecord {
    pub object_id: String,
    pub category: String,
    /// Panorama pixel space; `x_min > x_max` marks a seam-crossing box.
    pub bbox: BoundingBox,
    pub attributes: Vec<AttributeValue>,
    pub source_image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_view: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_confidence: Option<f64>,
    pub status: RecordStatus,
}

impl StructuredObjectRecord {
    pub fn attribute(&self, name: &str) -> Option<&AttributeValue> {
        let key = match_key(name);
        self.attributes.iter().find(|a| match_key(&a.name) == key)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    UnknownCategory,
    UnknownAttribute,
    DuplicateAttribute,
    ValueNotAllowed,
    ConfidenceOutOfRange,
    InvalidBox,
    FlaggedInvalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { valid: violations.is_empty(), violations }
    }
}

pub(super) fn validate(schema: &AttributeSchema, record: &StructuredObjectRecord) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |path: String, code, message: String| out.push(Violation { path, code, message });

    if record.status == RecordStatus::Invalid {
        push("status".into(), ViolationCode::FlaggedInvalid, "record is flagged invalid".into());
    }
    if !record.bbox.is_finite() || record.bbox.y_min > record.bbox.y_max {
        push("bbox".into(), ViolationCode::InvalidBox, format!("malformed box {:?}", record.bbox));
    }
    if let Some(c) = record.detection_confidence {
        if !(0.0..=1.0).contains(&c) {
            push(
                "detection_confidence".into(),
                ViolationCode::ConfidenceOutOfRange,
                format!("detection confidence {c} outside [0, 1]"),
            );
        }
    }

    let Some(category) = schema.category(&record.category) else {
        push(
            "category".into(),
            ViolationCode::UnknownCategory,
            format!("unknown category '{}'", record.category),
        );
        return ValidationReport::from_violations(out);
    };

    let mut seen: Vec<String> = Vec::new();
    for (i, attr) in record.attributes.iter().enumerate() {
        let path = format!("attributes[{i}]");
        if !(0.0..=1.0).contains(&attr.confidence) {
            push(
                format!("{path}.confidence"),
                ViolationCode::ConfidenceOutOfRange,
                format!("confidence {} outside [0, 1]", attr.confidence),
            );
        }
        let Some(def) = category.attribute(&attr.name) else {
            push(
                format!("{path}.name"),
                ViolationCode::UnknownAttribute,
                format!("'{}' is not an attribute of {}", attr.name, category.name),
            );
            continue;
        };
        let key = match_key(&def.name);
        if seen.contains(&key) {
            push(
                format!("{path}.name"),
                ViolationCode::DuplicateAttribute,
                format!("attribute '{}' appears more than once", def.name),
            );
        } else {
            seen.push(key);
        }
        if def.canonicalize(&attr.value).is_none() {
            push(
                format!("{path}.value"),
                ViolationCode::ValueNotAllowed,
                format!("'{}' is not an allowed value of {}.{}", attr.value, category.name, def.name),
            );
        }
    }
    ValidationReport::from_violations(out)
}

pub(super) fn canonicalize(schema: &AttributeSchema, record: &mut StructuredObjectRecord) -> bool {
    let Some(category) = schema.category(&record.category) else {
        return false;
    };
    let mut changed = false;
    if record.category != category.name {
        record.category = category.name.clone();
        changed = true;
    }
    for attr in &mut record.attributes {
        let Some(def) = category.attribute(&attr.name) else { continue };
        if attr.name != def.name {
            attr.name = def.name.clone();
            changed = true;
        }
        if let Some(v) = def.canonicalize(&attr.value) {
            if v != attr.value {
                attr.value = v;
                changed = true;
            }
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::schema::{AttributeDef, AttributeKind, CategoryDef};

    fn record(category: &str, attrs: Vec<AttributeValue>) -> StructuredObjectRecord {
        StructuredObjectRecord {
            object_id: "o1".into(),
            category: category.into(),
            bbox: BoundingBox { x_min: 1.0, y_min: 2.0, x_max: 3.0, y_max: 4.0 },
            attributes: attrs,
            source_image: "pano_001".into(),
            source_view: None,
            detection_confidence: Some(0.8),
            status: RecordStatus::Ok,
        }
    }

    fn fixture_schema() -> AttributeSchema {
        let mut synonyms = BTreeMap::new();
        synonyms.insert("crimson".to_string(), "red".to_string());
        AttributeSchema::from_parts(
            "fixture".into(),
            None,
            vec![CategoryDef {
                name: "Traffic Light".into(),
                aliases: vec![],
                attributes: vec![AttributeDef {
                    name: "Color".into(),
                    kind: AttributeKind::Enumerated,
                    allowed_values: vec!["red".into(), "green".into(), "yellow".into()],
                    synonyms,
                }],
            }],
        )
        .unwrap()
    }

    #[test]
    fn conforming_record_is_valid() {
        let s = AttributeSchema::default_roadside();
        let r = record("Traffic Light", vec![AttributeValue::new("Color", "red", 0.9)]);
        let rep = s.validate_record(&r);
        assert!(rep.valid, "{rep:?}");
        assert!(rep.violations.is_empty());
    }

    #[test]
    fn unknown_category() {
        let s = AttributeSchema::default_roadside();
        let rep = s.validate_record(&record("drone", vec![]));
        assert!(!rep.valid);
        assert_eq!(rep.violations[0].code, ViolationCode::UnknownCategory);
    }

    #[test]
    fn synonym_value_is_valid_and_canonicalizes() {
        let s = fixture_schema();
        let mut r = record("traffic light", vec![AttributeValue::new("color", "crimson", 0.7)]);
        assert!(s.validate_record(&r).valid);
        assert!(s.canonicalize_record(&mut r));
        assert_eq!(r.category, "Traffic Light");
        assert_eq!(r.attributes[0], AttributeValue::new("Color", "red", 0.7));
        assert!(!s.canonicalize_record(&mut r));
    }

    #[test]
    fn reports_every_violation() {
        let s = AttributeSchema::default_roadside();
        let mut r = record(
            "Traffic Light",
            vec![
                AttributeValue::new("Color", "purple", 1.5),
                AttributeValue::new("Altitude", "high", 0.5),
                AttributeValue::new("color", "red", 0.5),
            ],
        );
        r.status = RecordStatus::Invalid;
        let rep = s.validate_record(&r);
        let codes: Vec<_> = rep.violations.iter().map(|v| v.code).collect();
        assert_eq!(
            codes,
            vec![
                ViolationCode::FlaggedInvalid,
                ViolationCode::ConfidenceOutOfRange,
                ViolationCode::ValueNotAllowed,
                ViolationCode::UnknownAttribute,
                ViolationCode::DuplicateAttribute,
            ]
        );
        assert_eq!(s.validate_record(&r), rep);
    }

    #[test]
    fn record_json_shape() {
        let r = record("Traffic Light", vec![AttributeValue::new("Color", "red", 0.9)]);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["status"], "ok");
        assert_eq!(v["bbox"]["x_min"], 1.0);
        assert!(v.get("source_view").is_none());
        let back: StructuredObjectRecord = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }
}
