//! Detection AP with a small/medium/large breakdown.
//!
//! Detections are matched once per image and category (greedy by score,
//! highest IoU wins). Bucket scores then restrict the ground truth to one
//! size class: detections matched to ground truth of another class are
//! ignored, unmatched detections count against the class of their own box.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{classify_size, BBox, Dataset, Instance, SizeClass};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("detection {index} refers to unknown image `{image_id}`")]
    UnknownImageId { index: usize, image_id: String },
    #[error("detection {index} is invalid: {reason}")]
    InvalidDetection { index: usize, reason: String },
    #[error("detections file error at `{path}`: {message}")]
    Schema { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: Value,
    category: String,
    bbox: [f64; 4],
    score: f64,
}

/// Parse `[{"image_id", "category", "bbox": [x, y, w, h], "score"}, ...]`.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>, MetricsError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let records: Vec<DetectionRecord> =
        serde_path_to_error::deserialize(de).map_err(|e| MetricsError::Schema {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let image_id = match r.image_id {
                Value::String(s) => s,
                Value::Number(n) if n.is_u64() => n.to_string(),
                _ => {
                    return Err(MetricsError::Schema {
                        path: format!("[{i}].image_id"),
                        message: "expected a string or unsigned integer".into(),
                    })
                }
            };
            let [x, y, w, h] = r.bbox;
            Ok(Detection {
                image_id,
                bbox: BBox::new(x, y, w, h),
                category: r.category,
                score: r.score,
            })
        })
        .collect()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy one-to-one matching on one image. Detections are visited by
/// descending score (stable); each takes the unmatched ground truth of its
/// category with the highest IoU, if that IoU is at least `iou_thresh`.
/// Returns, per detection in input order, the index of its matched ground
/// truth.
pub fn match_detections(dets: &[Detection], gts: &[Instance], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.category != det.category {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// Recall points at which interpolated precision is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    #[default]
    #[serde(rename = "101")]
    Points101,
    #[serde(rename = "11")]
    Points11,
}

impl Interpolation {
    fn steps(self) -> u32 {
        match self {
            Interpolation::Points101 => 100,
            Interpolation::Points11 => 10,
        }
    }
}

/// AP of a ranked list of true/false positives against `n_gt` ground
/// truths. `None` when `n_gt == 0`.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope: best precision at this rank or any later one
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let steps = interp.steps();
    let mut sum = 0.0;
    let mut i = 0;
    for k in 0..=steps {
        let r = k as f64 / steps as f64;
        while i < recall.len() && recall[i] < r {
            i += 1;
        }
        if i < recall.len() {
            sum += precision[i];
        }
    }
    Some(sum / (steps + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub interpolation: Interpolation,
    /// Count `difficult` ground truths; when false they are ignored.
    pub include_difficult: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            interpolation: Interpolation::Points101,
            include_difficult: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketAp {
    pub all: Option<f64>,
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub ap: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BucketCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

impl BucketCounts {
    pub fn total(&self) -> usize {
        self.small + self.medium + self.large
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: Option<f64>,
    pub map_s: Option<f64>,
    pub map_m: Option<f64>,
    pub map_l: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    pub counts: BucketCounts,
}

#[derive(Clone, Copy, PartialEq)]
enum Bucket {
    All,
    Size(SizeClass),
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Evaluate `dets` against the ground truth in `gts`.
pub fn evaluate(dets: &[Detection], gts: &Dataset, cfg: &EvalConfig) -> Result<EvalResult, MetricsError> {
    let image_index: HashMap<&str, usize> = gts
        .images
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); gts.len()];
    for (i, det) in dets.iter().enumerate() {
        let &img = image_index
            .get(det.image_id.as_str())
            .ok_or_else(|| MetricsError::UnknownImageId {
                index: i,
                image_id: det.image_id.clone(),
            })?;
        if !det.score.is_finite() {
            return Err(MetricsError::InvalidDetection {
                index: i,
                reason: format!("score {} is not finite", det.score),
            });
        }
        if !det.bbox.is_valid() {
            return Err(MetricsError::InvalidDetection {
                index: i,
                reason: format!("box {:?} is degenerate", det.bbox),
            });
        }
        per_image[img].push(i);
    }

    // matched[d] = (image, gt index)
    let mut matched: Vec<Option<(usize, usize)>> = vec![None; dets.len()];
    for (img, det_ids) in per_image.iter().enumerate() {
        let local: Vec<Detection> = det_ids.iter().map(|&d| dets[d].clone()).collect();
        let m = match_detections(&local, &gts.images[img].instances, cfg.iou_thresh);
        for (k, g) in m.into_iter().enumerate() {
            matched[det_ids[k]] = g.map(|g| (img, g));
        }
    }

    let counted = |gt: &Instance| cfg.include_difficult || !gt.difficult;
    let mut counts = BucketCounts::default();
    for gt in gts.images.iter().flat_map(|e| &e.instances).filter(|g| counted(g)) {
        match gt.size_class() {
            SizeClass::Small => counts.small += 1,
            SizeClass::Medium => counts.medium += 1,
            SizeClass::Large => counts.large += 1,
        }
    }

    let mut by_score: Vec<usize> = (0..dets.len()).collect();
    by_score.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let ap_for = |category: &str, bucket: Bucket| -> Option<f64> {
        let in_bucket = |b: &BBox| match bucket {
            Bucket::All => true,
            Bucket::Size(s) => classify_size(b) == s,
        };
        let n_gt = gts
            .images
            .iter()
            .flat_map(|e| &e.instances)
            .filter(|g| g.category == category && counted(g) && in_bucket(&g.bbox))
            .count();
        let ranked: Vec<bool> = by_score
            .iter()
            .filter(|&&d| dets[d].category == category)
            .filter_map(|&d| match matched[d] {
                Some((img, g)) => {
                    let gt = &gts.images[img].instances[g];
                    (counted(gt) && in_bucket(&gt.bbox)).then_some(true)
                }
                None => in_bucket(&dets[d].bbox).then_some(false),
            })
            .collect();
        average_precision(&ranked, n_gt, cfg.interpolation)
    };

    let per_category: Vec<CategoryAp> = gts
        .categories
        .iter()
        .map(|c| CategoryAp {
            category: c.clone(),
            ap: ap_for(c, Bucket::All),
            ap_s: ap_for(c, Bucket::Size(SizeClass::Small)),
            ap_m: ap_for(c, Bucket::Size(SizeClass::Medium)),
            ap_l: ap_for(c, Bucket::Size(SizeClass::Large)),
        })
        .collect();

    Ok(EvalResult {
        map: mean(per_category.iter().map(|c| c.ap)),
        map_s: mean(per_category.iter().map(|c| c.ap_s)),
        map_m: mean(per_category.iter().map(|c| c.ap_m)),
        map_l: mean(per_category.iter().map(|c| c.ap_l)),
        per_category,
        counts,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.3}"))
}

/// Text table with columns mAP, mAP_L, mAP_M, mAP_S; one row per result.
pub fn render_table(rows: &[(&str, &EvalResult)]) -> String {
    let width = rows
        .iter()
        .map(|(name, _)| name.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "", "mAP", "mAP_L", "mAP_M", "mAP_S"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            name,
            cell(r.map),
            cell(r.map_l),
            cell(r.map_m),
            cell(r.map_s)
        ));
    }
    out
}
