//! Query-conditioned detection metrics: AP at a fixed IoU threshold with
//! all-points precision-recall interpolation, COCO-style mAP over the
//! 0.50:0.05:0.95 threshold ladder, proposal recall, and the report/
//! predictions file formats.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposals::{iou, BBox};

/// One scored detection for a (scene, query-category) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scene_id: u64,
    pub category: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground-truth box of a category in a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub bbox: BBox,
}

/// Average precision at one IoU threshold.
///
/// Predictions are ranked by score (ties keep insertion order), each is
/// greedily matched to the highest-IoU unmatched ground truth of the same
/// scene at IoU >= `iou_thr`, and the PR curve is integrated with all-points
/// interpolation. `None` when there are neither predictions nor ground
/// truths; `Some(0.0)` for predictions over an empty ground-truth set.
pub fn ap_at_iou(preds: &[Prediction], gts: &[GroundTruth], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return if preds.is_empty() { None } else { Some(0.0) };
    }
    if preds.is_empty() {
        return Some(0.0);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut gt_by_scene: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, gt) in gts.iter().enumerate() {
        gt_by_scene.entry(gt.scene_id).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_scene.get(&p.scene_id) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let v = iou(&p.bbox, &gts[gi].bbox);
                if v >= iou_thr && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // all-points interpolated area under the PR curve
    let n_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0.0;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1.0;
        }
        precisions.push(tp / (i as f64 + 1.0));
        recalls.push(tp / n_gt);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    Some(ap)
}

pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// COCO-convention mAP of a single category: mean AP over the ten IoU
/// thresholds 0.50:0.05:0.95.
pub fn category_map(preds: &[Prediction], gts: &[GroundTruth]) -> Option<f64> {
    let mut total = 0.0;
    for thr in COCO_IOU_THRESHOLDS {
        total += ap_at_iou(preds, gts, thr)?;
    }
    Some(total / COCO_IOU_THRESHOLDS.len() as f64)
}

/// Mean AP over categories (and the ten COCO thresholds). Categories with
/// neither predictions nor ground truths are excluded from the average.
pub fn mean_ap(preds_by_cat: &BTreeMap<usize, Vec<Prediction>>, gts_by_cat: &BTreeMap<usize, Vec<GroundTruth>>) -> f64 {
    let empty_p: Vec<Prediction> = Vec::new();
    let empty_g: Vec<GroundTruth> = Vec::new();
    let cats: std::collections::BTreeSet<usize> =
        preds_by_cat.keys().chain(gts_by_cat.keys()).copied().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for cat in cats {
        let p = preds_by_cat.get(&cat).unwrap_or(&empty_p);
        let g = gts_by_cat.get(&cat).unwrap_or(&empty_g);
        if let Some(ap) = category_map(p, g) {
            total += ap;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Fraction of ground truths covered by the `budget` top proposals at
/// IoU >= `iou_thr` (proposals assumed already ranked).
pub fn proposal_recall(proposals: &[BBox], gts: &[BBox], iou_thr: f64, budget: usize) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let pool = &proposals[..proposals.len().min(budget)];
    let covered = gts
        .iter()
        .filter(|gt| pool.iter().any(|p| iou(p, gt) >= iou_thr))
        .count();
    covered as f64 / gts.len() as f64
}

/// Per-category entry of an [`EvalReport`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CategoryReport {
    pub id: usize,
    pub name: String,
    /// Percent.
    pub ap50: f64,
    /// Percent, COCO convention.
    pub map: f64,
    pub gt_count: usize,
}

/// Evaluation summary; serialized as deterministic JSON.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub schema_version: u32,
    /// The mAP averaging convention used everywhere in this artifact.
    pub map_convention: String,
    pub split: String,
    pub fusion: String,
    pub seed: u64,
    pub config_hash: String,
    /// Percent.
    pub ap50: f64,
    /// Percent.
    pub map: f64,
    /// Top-budget proposal recall at the configured IoU.
    pub proposal_recall: f64,
    pub recall_budget: usize,
    pub per_category: Vec<CategoryReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table mirroring the paper-style metric columns.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# split={} fusion={} seed={} (mAP convention: {})\n",
            self.split, self.fusion, self.seed, self.map_convention
        ));
        out.push_str(&format!(
            "{:<24} {:>8} {:>8}\n",
            "Method / Category", "%AP@50", "%mAP"
        ));
        out.push_str(&format!(
            "{:<24} {:>8.1} {:>8.1}\n",
            format!("fusion={}", self.fusion),
            self.ap50,
            self.map
        ));
        for c in &self.per_category {
            out.push_str(&format!("  {:<22} {:>8.1} {:>8.1}\n", c.name, c.ap50, c.map));
        }
        out.push_str(&format!(
            "proposal-recall@{} = {:.4}\n",
            self.recall_budget, self.proposal_recall
        ));
        out
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    scene_id: u64,
    category: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

/// Writes predictions as JSON lines `{scene_id, category, box, score}`.
pub fn write_predictions(path: &Path, preds: &[Prediction], category_names: &[String]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        let row = PredictionRow {
            scene_id: p.scene_id,
            category: category_names
                .get(p.category)
                .cloned()
                .ok_or_else(|| Error::Eval(format!("unknown category id {}", p.category)))?,
            bbox: [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2],
            score: p.score,
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path, category_names: &[String]) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)?;
    let mut preds = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("predictions line {}: {e}", lineno + 1)))?;
        let category = category_names
            .iter()
            .position(|n| *n == row.category)
            .ok_or_else(|| Error::Data(format!("predictions line {}: unknown category {:?}", lineno + 1, row.category)))?;
        preds.push(Prediction {
            scene_id: row.scene_id,
            category,
            bbox: BBox::new(row.bbox[0], row.bbox[1], row.bbox[2], row.bbox[3]),
            score: row.score,
        });
    }
    Ok(preds)
}
