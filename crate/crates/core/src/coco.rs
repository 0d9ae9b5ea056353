//! COCO-format annotation and result files.
//!
//! Annotations may carry an `attributes` object (attribute name → value),
//! which is how ground-truth attribute labels and exemplar payloads are
//! stored. Fields not modelled here are ignored on read.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
}

impl CocoImage {
    /// The file name without directory or extension, which is how the
    /// pipeline names images.
    pub fn stem(&self) -> &str {
        let name = self.file_name.rsplit(['/', '\\']).next().unwrap_or(&self.file_name);
        name.rsplit_once('.').map_or(name, |(s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub attributes: Map<String, Value>,
}

impl CocoAnnotation {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let [x, y, w, h] = self.bbox;
        BoundingBox::from_xywh(x, y, w, h)
    }

    /// Attribute pairs in file order; non-string values are rendered as JSON.
    pub fn attribute_pairs(&self) -> Vec<(String, String)> {
        self.attributes
            .iter()
            .map(|(k, v)| {
                let value = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), value)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        ds.check().map_err(|m| Error::parse(origin, m))?;
        Ok(ds)
    }

    /// Checks id uniqueness, references and boxes.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id) {
                return Err(format!("duplicate image id {}", img.id));
            }
        }
        let mut cats = HashSet::new();
        let mut names = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(format!("duplicate category id {}", c.id));
            }
            if !names.insert(c.name.to_lowercase()) {
                return Err(format!("duplicate category name '{}'", c.name));
            }
        }
        let mut anns = HashSet::new();
        for a in &self.annotations {
            if !anns.insert(a.id) {
                return Err(format!("duplicate annotation id {}", a.id));
            }
            if !seen.contains(&a.image_id) {
                return Err(format!("annotation {} references unknown image {}", a.id, a.image_id));
            }
            if !cats.contains(&a.category_id) {
                return Err(format!("annotation {} references unknown category {}", a.id, a.category_id));
            }
            let [_, _, w, h] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
                return Err(format!("annotation {} has an invalid box {:?}", a.id, a.bbox));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category(&self, id: u64) -> Option<&CocoCategory> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Image lookup by file name or stem.
    pub fn image_index(&self) -> HashMap<String, u64> {
        let mut out = HashMap::new();
        for img in &self.images {
            out.insert(img.stem().to_string(), img.id);
            out.insert(img.file_name.clone(), img.id);
        }
        out
    }

    /// Annotations grouped by image id, each group in file order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&CocoAnnotation>> {
        let mut out: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn load_results(path: &Path) -> Result<Vec<CocoResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "info": {"description": "x"},
        "images": [{"id": 1, "file_name": "dir/pano_001.png", "width": 100, "height": 50}],
        "categories": [{"id": 3, "name": "Bollard"}],
        "annotations": [{"id": 9, "image_id": 1, "category_id": 3, "bbox": [1, 2, 3, 4], "area": 12, "iscrowd": 0,
                         "attributes": {"Material": "steel", "Height": 1.2}}]
    }"#;

    #[test]
    fn parses_with_attribute_extension() {
        let ds = CocoDataset::from_json_str(SAMPLE, "t").unwrap();
        assert_eq!(ds.images[0].stem(), "pano_001");
        let a = &ds.annotations[0];
        assert_eq!(a.bounding_box().unwrap(), BoundingBox::new(1.0, 2.0, 4.0, 6.0).unwrap());
        assert_eq!(a.attribute_pairs(), vec![("Material".into(), "steel".into()), ("Height".into(), "1.2".into())]);
        assert_eq!(ds.image_index()["pano_001"], 1);
    }

    #[test]
    fn rejects_dangling_references() {
        let bad = SAMPLE.replace("\"category_id\": 3", "\"category_id\": 4");
        assert!(CocoDataset::from_json_str(&bad, "t").is_err());
        let bad = SAMPLE.replace("\"id\": 9, \"image_id\": 1", "\"id\": 9, \"image_id\": 2");
        assert!(CocoDataset::from_json_str(&bad, "t").is_err());
    }
}
