//! Detection and attribute metrics, and the report tables built from them.
//!
//! Detection follows the COCO protocol: per image and class, predictions
//! are matched greedily in descending confidence to the unmatched ground
//! truth box of highest IoU at or above the threshold; AP is the mean of
//! the monotonized precision sampled at 101 recall points.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coco::{CocoDataset, CocoResult};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::schema::{match_key, AttributeSchema, RecordStatus, StructuredObjectRecord, UNKNOWN_VALUE};

/// Detections kept per image and class, as in COCO.
pub const MAX_DETS: usize = 100;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Recall sample points 0.00, 0.01, …, 1.00.
pub fn recall_points() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) * 0.01).collect()
}

/// Intersection over union of two ordinary boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(overlap(a, b))
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// IoU of two panorama-space boxes, either of which may wrap the seam.
pub fn iou_pano(a: &BoundingBox, b: &BoundingBox, pano_width: f64) -> f64 {
    let a = a.unwrapped(pano_width);
    let b = b.unwrapped(pano_width);
    [-pano_width, 0.0, pano_width]
        .iter()
        .map(|&dx| overlap(&a, &b.shifted_x(dx)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Matching outcome for one image and class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub thresholds: Vec<f64>,
    /// Scores of the kept predictions, highest first.
    pub scores: Vec<f64>,
    /// `tp[t][i]`: prediction `i` is a true positive at threshold `t`.
    pub tp: Vec<Vec<bool>>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self, t: usize) -> usize {
        self.tp[t].iter().filter(|&&x| x).count()
    }

    pub fn false_positives(&self, t: usize) -> usize {
        self.scores.len() - self.true_positives(t)
    }

    pub fn false_negatives(&self, t: usize) -> usize {
        self.num_gt - self.true_positives(t)
    }

    pub fn precision(&self, t: usize) -> Option<f64> {
        (!self.scores.is_empty()).then(|| self.true_positives(t) as f64 / self.scores.len() as f64)
    }

    pub fn recall(&self, t: usize) -> Option<f64> {
        (self.num_gt > 0).then(|| self.true_positives(t) as f64 / self.num_gt as f64)
    }
}

/// Greedy matching of one image's predictions of one class against its
/// ground truth. At most `max_dets` highest-scoring predictions are kept.
/// `pano_width` switches to seam-aware IoU.
pub fn match_detections(
    preds: &[ScoredBox],
    gts: &[BoundingBox],
    thresholds: &[f64],
    max_dets: usize,
    pano_width: Option<f64>,
) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order.truncate(max_dets);
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&p| {
            gts.iter()
                .map(|g| match pano_width {
                    Some(w) => iou_pano(&preds[p].bbox, g, w),
                    None => overlap(&preds[p].bbox, g),
                })
                .collect()
        })
        .collect();
    let tp = thresholds
        .iter()
        .map(|&thr| {
            let mut taken = vec![false; gts.len()];
            ious.iter()
                .map(|row| {
                    let mut best: Option<(usize, f64)> = None;
                    for (g, &v) in row.iter().enumerate() {
                        if taken[g] || v < thr {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((g, v));
                        }
                    }
                    match best {
                        Some((g, _)) => {
                            taken[g] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect()
        })
        .collect();
    MatchResult { thresholds: thresholds.to_vec(), scores: order.iter().map(|&p| preds[p].score).collect(), tp, num_gt: gts.len() }
}

/// AP and final recall of one class at threshold index `t`, over all
/// images. `None` when the class has no ground truth.
pub fn average_precision(matches: &[MatchResult], t: usize) -> Option<(f64, f64)> {
    let num_gt: usize = matches.iter().map(|m| m.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, bool)> =
        matches.iter().flat_map(|m| m.scores.iter().copied().zip(m.tp[t].iter().copied())).collect();
    // Stable, so equal scores keep image order.
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &dets {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let points = recall_points();
    let sum: f64 = points
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some((sum / points.len() as f64, recall.last().copied().unwrap_or(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalObject {
    pub category: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrediction {
    pub category: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalImage {
    pub gts: Vec<EvalObject>,
    pub preds: Vec<EvalPrediction>,
    /// Set for panoramas so seam-wrapped boxes are compared correctly.
    #[serde(default)]
    pub pano_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionDataset {
    pub categories: Vec<String>,
    pub images: Vec<EvalImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub category: String,
    pub num_gt: usize,
    pub num_pred: usize,
    /// AP per threshold; `None` for classes without ground truth.
    pub ap_per_threshold: Option<Vec<f64>>,
    pub recall_per_threshold: Option<Vec<f64>>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub mar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassDetection>,
    /// `None` when no class has ground truth.
    pub summary: Option<DetectionSummary>,
    /// Classes left out of the means for lack of ground truth.
    pub excluded: Vec<String>,
}

fn index_of(thresholds: &[f64], value: f64) -> Option<usize> {
    thresholds.iter().position(|&t| (t - value).abs() < 1e-9)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-class AP at every threshold plus the class-mean summary.
pub fn map_summary(ds: &DetectionDataset, thresholds: &[f64]) -> Result<DetectionMetrics> {
    if thresholds.is_empty() {
        return Err(Error::Evaluation("no IoU thresholds given".into()));
    }
    let per_class: Vec<ClassDetection> = ds
        .categories
        .par_iter()
        .map(|cat| {
            let mut num_pred = 0;
            let matches: Vec<MatchResult> = ds
                .images
                .iter()
                .map(|img| {
                    let gts: Vec<BoundingBox> = img.gts.iter().filter(|g| &g.category == cat).map(|g| g.bbox).collect();
                    let preds: Vec<ScoredBox> = img
                        .preds
                        .iter()
                        .filter(|p| &p.category == cat)
                        .map(|p| ScoredBox { bbox: p.bbox, score: p.score })
                        .collect();
                    num_pred += preds.len().min(MAX_DETS);
                    match_detections(&preds, &gts, thresholds, MAX_DETS, img.pano_width)
                })
                .collect();
            let num_gt = matches.iter().map(|m| m.num_gt).sum();
            let results: Option<Vec<(f64, f64)>> = (0..thresholds.len()).map(|t| average_precision(&matches, t)).collect();
            let (aps, recalls) = match results {
                Some(r) => {
                    let (a, r): (Vec<f64>, Vec<f64>) = r.into_iter().unzip();
                    (Some(a), Some(r))
                }
                None => (None, None),
            };
            let at = |v: f64| aps.as_ref().and_then(|a| index_of(thresholds, v).map(|i| a[i]));
            ClassDetection {
                category: cat.clone(),
                num_gt,
                num_pred,
                ap: aps.as_ref().and_then(|a| mean(a.iter().copied())),
                ap50: at(0.5),
                ap75: at(0.75),
                ar: recalls.as_ref().and_then(|r| mean(r.iter().copied())),
                ap_per_threshold: aps,
                recall_per_threshold: recalls,
            }
        })
        .collect();
    let defined: Vec<&ClassDetection> = per_class.iter().filter(|c| c.ap.is_some()).collect();
    let summary = (!defined.is_empty()).then(|| DetectionSummary {
        map: mean(defined.iter().filter_map(|c| c.ap)).unwrap_or(0.0),
        map50: mean(defined.iter().filter_map(|c| c.ap50)).unwrap_or(f64::NAN),
        map75: mean(defined.iter().filter_map(|c| c.ap75)).unwrap_or(f64::NAN),
        mar: mean(defined.iter().filter_map(|c| c.ar)).unwrap_or(0.0),
    });
    let excluded = per_class.iter().filter(|c| c.ap.is_none()).map(|c| c.category.clone()).collect();
    Ok(DetectionMetrics { thresholds: thresholds.to_vec(), per_class, summary, excluded })
}

/// Ground-truth attributes of one object and the attributes predicted on
/// its crop (`None` when no usable prediction exists).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSample {
    pub category: String,
    pub gt: Vec<(String, String)>,
    pub pred: Option<Vec<(String, String)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCount {
    pub objects: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub category: String,
    #[serde(flatten)]
    pub count: AccuracyCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    /// Classes with at least one object, in schema order.
    pub per_class: Vec<ClassAccuracy>,
    /// Σ correct / Σ K over all objects.
    pub overall: AccuracyCount,
}

fn lookup<'a>(pairs: &'a [(String, String)], name: &str) -> Option<&'a str> {
    let key = match_key(name);
    pairs.iter().find(|(n, _)| match_key(n) == key).map(|(_, v)| v.as_str())
}

/// Fraction of attribute values predicted correctly after synonym
/// canonicalization. Each object contributes the `K` attributes its schema
/// category defines; a ground-truth value that is absent counts as
/// `unknown`, a predicted value that is absent counts as wrong.
pub fn attribute_accuracy(samples: &[AttributeSample], schema: &AttributeSchema) -> Result<AttributeMetrics> {
    let mut per_class: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for s in samples {
        let idx = schema
            .category_index(&s.category)
            .ok_or_else(|| Error::Evaluation(format!("category '{}' is not in the schema", s.category)))?;
        let cat = &schema.categories()[idx];
        let mut correct = 0;
        for def in &cat.attributes {
            let gt = lookup(&s.gt, &def.name).unwrap_or(UNKNOWN_VALUE);
            let gt = def.canonicalize(gt).unwrap_or_else(|| gt.trim().to_lowercase());
            let pred = s
                .pred
                .as_deref()
                .and_then(|p| lookup(p, &def.name))
                .and_then(|v| def.canonicalize(v));
            if pred.as_deref() == Some(gt.as_str()) {
                correct += 1;
            }
        }
        let e = per_class.entry(idx).or_default();
        e.0 += 1;
        e.1 += correct;
        e.2 += cat.attributes.len();
    }
    let total: usize = per_class.values().map(|v| v.2).sum();
    if total == 0 {
        return Err(Error::Evaluation("no attributes to score".into()));
    }
    let count = |(objects, correct, total): (usize, usize, usize)| AccuracyCount {
        objects,
        correct,
        total,
        accuracy: correct as f64 / total as f64,
    };
    let overall = count(per_class.values().fold((0, 0, 0), |a, v| (a.0 + v.0, a.1 + v.1, a.2 + v.2)));
    let per_class = per_class
        .into_iter()
        .map(|(i, v)| ClassAccuracy { category: schema.categories()[i].name.clone(), count: count(v) })
        .collect();
    Ok(AttributeMetrics { per_class, overall })
}

/// Where a run's predictions come from.
pub enum Predictions {
    Records(Vec<StructuredObjectRecord>),
    Coco(Vec<CocoResult>),
}

impl Predictions {
    /// Reads a records JSON-Lines file, or a COCO results array when the
    /// file starts with `[`.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        if text.trim_start().starts_with('[') {
            return serde_json::from_str(&text).map(Predictions::Coco).map_err(|e| Error::parse(origin, e));
        }
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("{origin}:{}", n + 1), e)))
            .collect::<Result<_>>()
            .map(Predictions::Records)
    }
}

/// Counts of predictions that could not be placed against the ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub predictions: usize,
    pub unknown_image: usize,
    pub unknown_category: usize,
    /// Records flagged invalid; their boxes still count as detections.
    pub invalid_records: usize,
}

fn category_resolver<'a>(gt: &'a CocoDataset, schema: &'a AttributeSchema) -> impl Fn(&str) -> Option<String> + 'a {
    move |label: &str| {
        let key = match_key(label);
        if let Some(c) = gt.categories.iter().find(|c| match_key(&c.name) == key) {
            return Some(c.name.clone());
        }
        let canonical = schema.category(label)?;
        gt.categories.iter().find(|c| schema.category(&c.name).is_some_and(|s| s.name == canonical.name)).map(|c| c.name.clone())
    }
}

/// Pairs ground truth with predictions image by image.
pub fn detection_dataset(gt: &CocoDataset, preds: &Predictions, schema: &AttributeSchema) -> Result<(DetectionDataset, Alignment)> {
    let mut images: Vec<EvalImage> = Vec::with_capacity(gt.images.len());
    let mut slot = HashMap::new();
    for (i, img) in gt.images.iter().enumerate() {
        slot.insert(img.id, i);
        let pano = img.width > 0 && img.width == 2 * img.height;
        images.push(EvalImage { gts: Vec::new(), preds: Vec::new(), pano_width: pano.then_some(f64::from(img.width)) });
    }
    for a in &gt.annotations {
        let category = gt.category(a.category_id).expect("checked on load").name.clone();
        let bbox = a.bounding_box().map_err(|e| Error::Evaluation(format!("annotation {}: {e}", a.id)))?;
        images[slot[&a.image_id]].gts.push(EvalObject { category, bbox });
    }
    let resolve = category_resolver(gt, schema);
    let by_name = gt.image_index();
    let mut align = Alignment::default();
    let mut place = |image: Option<u64>, label: Option<String>, bbox: BoundingBox, score: f64, images: &mut Vec<EvalImage>| {
        align.predictions += 1;
        let Some(i) = image.and_then(|id| slot.get(&id).copied()) else {
            align.unknown_image += 1;
            return;
        };
        let Some(category) = label else {
            align.unknown_category += 1;
            return;
        };
        images[i].preds.push(EvalPrediction { category, bbox, score });
    };
    match preds {
        Predictions::Records(records) => {
            for r in records {
                if r.status == RecordStatus::Invalid {
                    align.invalid_records += 1;
                }
                let image = by_name.get(&r.source_image).copied();
                place(image, resolve(&r.category), r.bbox, r.detection_confidence.unwrap_or(1.0), &mut images);
            }
        }
        Predictions::Coco(results) => {
            for r in results {
                let label = gt.category(r.category_id).map(|c| c.name.clone());
                let [x, y, w, h] = r.bbox;
                let bbox = BoundingBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h };
                place(Some(r.image_id), label, bbox, r.score, &mut images);
            }
        }
    }
    let categories = gt.categories.iter().map(|c| c.name.clone()).collect();
    Ok((DetectionDataset { categories, images }, align))
}

/// Pairs each ground-truth object with the record predicted on its crop,
/// matched through the record's `object_id` (`ann-<annotation id>`).
/// Returns `None` when no record refers to a ground-truth object.
pub fn attribute_samples(gt: &CocoDataset, records: &[StructuredObjectRecord]) -> Option<Vec<AttributeSample>> {
    let by_id: HashMap<&str, &StructuredObjectRecord> = records.iter().map(|r| (r.object_id.as_str(), r)).collect();
    let mut any = false;
    let samples = gt
        .annotations
        .iter()
        .map(|a| {
            let key = format!("ann-{}", a.id);
            let pred = by_id.get(key.as_str()).inspect(|_| any = true);
            AttributeSample {
                category: gt.category(a.category_id).expect("checked on load").name.clone(),
                gt: a.attribute_pairs(),
                pred: pred
                    .filter(|r| r.status != RecordStatus::Invalid)
                    .map(|r| r.attributes.iter().map(|v| (v.name.clone(), v.value.clone())).collect()),
            }
        })
        .collect();
    any.then_some(samples)
}

/// One evaluated dataset, optionally tagged for the cross-city layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_city: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_city: Option<String>,
    pub detection: Option<DetectionMetrics>,
    pub attributes: Option<AttributeMetrics>,
    #[serde(default)]
    pub alignment: Alignment,
}

impl RunMetrics {
    fn setting(&self) -> Option<&'static str> {
        match (&self.train_city, &self.test_city) {
            (Some(a), Some(b)) if a == b => Some("In-domain"),
            (Some(_), Some(_)) => Some("Cross-city"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub category: String,
    /// One entry per run; `None` where the class is undefined in that run.
    pub values: Vec<Option<f64>>,
}

/// A table of per-class rows, one column per run and metric, plus the
/// unweighted class-mean "All" row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub runs: Vec<String>,
    pub metrics: Vec<String>,
    /// Row values are laid out run-major: run 0 metric 0, run 0 metric 1, …
    pub rows: Vec<ClassRow>,
    pub all: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCityRow {
    pub train_city: String,
    pub test_city: String,
    pub setting: String,
    pub map: Option<f64>,
    pub map50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub run: String,
    pub group: String,
    pub classes: usize,
    pub map: Option<f64>,
    pub map50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub summary: Option<DetectionSummary>,
    pub attribute_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<String>,
    pub summary: Vec<SummaryRow>,
    pub detection_table: Option<ClassTable>,
    pub attribute_table: Option<ClassTable>,
    /// Σ correct / Σ K per attribute-scored run, aligned with the
    /// attribute table's runs.
    pub attribute_overall: Vec<f64>,
    pub cross_city: Option<Vec<CrossCityRow>>,
    pub groups: Option<Vec<GroupRow>>,
    pub excluded: Vec<String>,
    pub runs: Vec<RunMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Classes reported as "novel"; the rest of the category list is "base".
    pub novel_classes: Vec<String>,
}

fn class_table(categories: &[String], runs: &[&RunMetrics], metrics: &[&str], value: impl Fn(&RunMetrics, &str, &str) -> Option<f64>) -> ClassTable {
    let rows: Vec<ClassRow> = categories
        .iter()
        .map(|cat| ClassRow {
            category: cat.clone(),
            values: runs.iter().flat_map(|r| metrics.iter().map(|m| value(r, cat, m))).collect(),
        })
        .collect();
    let width = runs.len() * metrics.len();
    let all = (0..width).map(|c| mean(rows.iter().filter_map(|r| r.values[c]))).collect();
    ClassTable {
        runs: runs.iter().map(|r| r.label.clone()).collect(),
        metrics: metrics.iter().map(|m| m.to_string()).collect(),
        rows,
        all,
    }
}

fn class_detection<'a>(run: &'a RunMetrics, cat: &str) -> Option<&'a ClassDetection> {
    run.detection.as_ref()?.per_class.iter().find(|c| c.category == cat)
}

/// Assembles the report tables from per-run metrics.
///
/// The per-class detection table lists in-domain (or untagged) runs; when
/// two or more runs carry city tags a cross-city table is added.
pub fn build_report(categories: &[String], runs: Vec<RunMetrics>, options: &ReportOptions) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Evaluation("no runs to report".into()));
    }
    for n in &options.novel_classes {
        if !categories.iter().any(|c| match_key(c) == match_key(n)) {
            return Err(Error::Evaluation(format!("novel class '{n}' is not a dataset category")));
        }
    }
    let tagged: Vec<&RunMetrics> = runs.iter().filter(|r| r.setting().is_some()).collect();
    let table_runs: Vec<&RunMetrics> = runs
        .iter()
        .filter(|r| r.detection.is_some() && r.setting() != Some("Cross-city"))
        .collect();
    let detection_table = (!table_runs.is_empty()).then(|| {
        class_table(categories, &table_runs, &["mAP", "mAP@50"], |r, cat, m| {
            let c = class_detection(r, cat)?;
            if m == "mAP" {
                c.ap
            } else {
                c.ap50
            }
        })
    });
    let attr_runs: Vec<&RunMetrics> = runs.iter().filter(|r| r.attributes.is_some()).collect();
    let attribute_table = (!attr_runs.is_empty()).then(|| {
        class_table(categories, &attr_runs, &["Accuracy"], |r, cat, _| {
            let a = r.attributes.as_ref()?;
            a.per_class.iter().find(|c| match_key(&c.category) == match_key(cat)).map(|c| c.count.accuracy)
        })
    });
    let attribute_overall = attr_runs.iter().filter_map(|r| r.attributes.as_ref().map(|a| a.overall.accuracy)).collect();

    let cross_city = (tagged.len() >= 2).then(|| {
        let mut trains: Vec<&str> = Vec::new();
        for r in &tagged {
            let t = r.train_city.as_deref().expect("tagged");
            if !trains.contains(&t) {
                trains.push(t);
            }
        }
        let mut rows = Vec::new();
        for t in trains {
            let mut group: Vec<&&RunMetrics> = tagged.iter().filter(|r| r.train_city.as_deref() == Some(t)).collect();
            group.sort_by_key(|r| r.setting() != Some("In-domain"));
            for r in group {
                let s = r.detection.as_ref().and_then(|d| d.summary);
                rows.push(CrossCityRow {
                    train_city: t.to_string(),
                    test_city: r.test_city.clone().expect("tagged"),
                    setting: r.setting().expect("tagged").to_string(),
                    map: s.map(|s| s.map),
                    map50: s.map(|s| s.map50),
                });
            }
        }
        rows
    });

    let groups = (!options.novel_classes.is_empty()).then(|| {
        let is_novel = |c: &str| options.novel_classes.iter().any(|n| match_key(n) == match_key(c));
        let mut rows = Vec::new();
        for r in runs.iter().filter(|r| r.detection.is_some()) {
            for (group, novel) in [("Base", false), ("Novel", true)] {
                let members: Vec<&ClassDetection> = r
                    .detection
                    .as_ref()
                    .expect("filtered")
                    .per_class
                    .iter()
                    .filter(|c| is_novel(&c.category) == novel && c.ap.is_some())
                    .collect();
                rows.push(GroupRow {
                    run: r.label.clone(),
                    group: group.to_string(),
                    classes: members.len(),
                    map: mean(members.iter().filter_map(|c| c.ap)),
                    map50: mean(members.iter().filter_map(|c| c.ap50)),
                });
            }
        }
        rows
    });

    let summary = runs
        .iter()
        .map(|r| SummaryRow {
            run: r.label.clone(),
            summary: r.detection.as_ref().and_then(|d| d.summary),
            attribute_accuracy: r.attributes.as_ref().map(|a| a.overall.accuracy),
        })
        .collect();
    let mut excluded = Vec::new();
    for r in &runs {
        if let Some(d) = &r.detection {
            excluded.extend(d.excluded.iter().map(|c| format!("{}: {c}", r.label)));
        }
    }
    Ok(EvalReport {
        categories: categories.to_vec(),
        summary,
        detection_table,
        attribute_table,
        attribute_overall,
        cross_city,
        groups,
        excluded,
        runs,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x * 100.0))
}

fn frac(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Left-aligns the first column and right-aligns the rest.
fn render_grid(out: &mut String, title: &str, header: &[String], body: &[Vec<String>], footer: Option<&Vec<String>>) {
    let cols = header.len();
    let mut width = vec![0; cols];
    for row in std::iter::once(header).chain(body.iter().map(Vec::as_slice)).chain(footer.map(Vec::as_slice)) {
        for (i, cell) in row.iter().enumerate() {
            width[i] = width[i].max(cell.chars().count());
        }
    }
    let line = |row: &[String]| -> String {
        row.iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[0]) } else { format!("{c:>w$}", w = width[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let rule = "-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1));
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{rule}");
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{rule}");
    for row in body {
        let _ = writeln!(out, "{}", line(row));
    }
    if let Some(f) = footer {
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "{}", line(f));
    }
    let _ = writeln!(out, "{rule}");
}

fn class_table_rows(t: &ClassTable) -> (Vec<String>, Vec<Vec<String>>, Vec<String>) {
    let mut header = vec!["Category".to_string()];
    for r in &t.runs {
        for m in &t.metrics {
            header.push(if t.runs.len() == 1 && r.is_empty() { m.clone() } else { format!("{r} {m}") });
        }
    }
    let body = t
        .rows
        .iter()
        .map(|row| std::iter::once(row.category.clone()).chain(row.values.iter().map(|v| pct(*v))).collect())
        .collect();
    let footer = std::iter::once("All".to_string()).chain(t.all.iter().map(|v| pct(*v))).collect();
    (header, body, footer)
}

/// Plain-text rendering of every table in the report.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let header: Vec<String> = ["Run", "mAP", "mAP@50", "mAP@75", "mAR", "Attr. acc."].iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| {
            vec![
                s.run.clone(),
                pct(s.summary.map(|x| x.map)),
                pct(s.summary.map(|x| x.map50)),
                pct(s.summary.map(|x| x.map75)),
                pct(s.summary.map(|x| x.mar)),
                pct(s.attribute_accuracy),
            ]
        })
        .collect();
    render_grid(&mut out, "Summary (percent)", &header, &body, None);

    if let Some(t) = &report.detection_table {
        out.push('\n');
        let (h, b, f) = class_table_rows(t);
        render_grid(&mut out, "Per-class detection (percent)", &h, &b, Some(&f));
    }
    if let Some(rows) = &report.cross_city {
        out.push('\n');
        let header: Vec<String> = ["Train City", "Test City", "Setting", "mAP", "mAP@50"].iter().map(|s| s.to_string()).collect();
        let mut body = Vec::new();
        let mut last = None;
        for r in rows {
            let train = if last == Some(&r.train_city) { String::new() } else { r.train_city.clone() };
            last = Some(&r.train_city);
            body.push(vec![train, r.test_city.clone(), r.setting.clone(), frac(r.map), frac(r.map50)]);
        }
        render_grid(&mut out, "Cross-city detection", &header, &body, None);
    }
    if let Some(rows) = &report.groups {
        out.push('\n');
        let header: Vec<String> = ["Run", "Group", "Classes", "mAP", "mAP@50"].iter().map(|s| s.to_string()).collect();
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.run.clone(), r.group.clone(), r.classes.to_string(), pct(r.map), pct(r.map50)])
            .collect();
        render_grid(&mut out, "Base / novel detection (percent)", &header, &body, None);
    }
    if let Some(t) = &report.attribute_table {
        out.push('\n');
        let (h, b, f) = class_table_rows(t);
        render_grid(&mut out, "Per-class attribute accuracy (percent)", &h, &b, Some(&f));
        let overall: Vec<String> =
            t.runs.iter().zip(&report.attribute_overall).map(|(r, v)| format!("{r} {:.1}", v * 100.0)).collect();
        let _ = writeln!(out, "Overall accuracy, correct / total attributes: {}", overall.join(", "));
    }
    if !report.excluded.is_empty() {
        let _ = writeln!(out, "\nClasses without ground truth (excluded from means): {}", report.excluded.join("; "));
    }
    out
}

/// One CSV row per run and class with every per-class figure.
pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("run,category,num_gt,num_pred,ap,ap50,ap75,ar,attribute_accuracy\n");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for r in &report.runs {
        for cat in &report.categories {
            let d = class_detection(r, cat);
            let a = r
                .attributes
                .as_ref()
                .and_then(|a| a.per_class.iter().find(|c| match_key(&c.category) == match_key(cat)))
                .map(|c| c.count.accuracy);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.label),
                csv_field(cat),
                d.map_or(0, |d| d.num_gt),
                d.map_or(0, |d| d.num_pred),
                cell(d.and_then(|d| d.ap)),
                cell(d.and_then(|d| d.ap50)),
                cell(d.and_then(|d| d.ap75)),
                cell(d.and_then(|d| d.ar)),
                cell(a),
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
