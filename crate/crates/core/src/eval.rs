//! SGDET Recall@K and mean Recall@K.
//!
//! A predicted triplet is correct when its subject label, predicate and
//! object label equal a ground-truth triplet's and the hull of its two boxes
//! overlaps the ground-truth hull with IoU strictly above the threshold.
//! `MatchMode::PerBox` instead requires each box individually above the
//! threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_jsonl, DatasetError};
use crate::domain::{normalize_key, BBox};
use crate::geometry::{iou, union_box};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth contains no triplets")]
    EmptyGroundTruth,
    #[error("K values must be positive")]
    InvalidK,
    #[error("IoU threshold {0} must lie in [0, 1)")]
    InvalidThreshold(f64),
    #[error("unknown match mode {0:?} (expected `union` or `per_box`)")]
    UnknownMatchMode(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Union,
    PerBox,
}

impl FromStr for MatchMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(MatchMode::Union),
            "per_box" | "per-box" => Ok(MatchMode::PerBox),
            other => Err(EvalError::UnknownMatchMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedTriplet {
    pub source_label: String,
    pub source_box: BBox,
    pub target_label: String,
    pub target_box: BBox,
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl GroundedTriplet {
    fn score(&self) -> f64 {
        self.confidence.unwrap_or(0.0)
    }

    fn same_labels(&self, other: &GroundedTriplet) -> bool {
        self.relation == other.relation
            && normalize_key(&self.source_label) == normalize_key(&other.source_label)
            && normalize_key(&self.target_label) == normalize_key(&other.target_label)
    }

    fn overlaps(&self, gt: &GroundedTriplet, threshold: f64, mode: MatchMode) -> bool {
        match mode {
            MatchMode::Union => {
                let p = union_box(&self.source_box, &self.target_box);
                let g = union_box(&gt.source_box, &gt.target_box);
                iou(&p, &g) > threshold
            }
            MatchMode::PerBox => {
                iou(&self.source_box, &gt.source_box) > threshold
                    && iou(&self.target_box, &gt.target_box) > threshold
            }
        }
    }
}

/// Prediction indices by descending confidence, ties in original order.
fn confidence_order(preds: &[GroundedTriplet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score().total_cmp(&preds[a].score()));
    order
}

/// Greedy one-to-one matching in confidence order. Each prediction takes the
/// first unmatched ground truth it satisfies. Returns `(pred, gt)` indices.
pub fn match_triplets(
    preds: &[GroundedTriplet],
    gts: &[GroundedTriplet],
    iou_threshold: f64,
    mode: MatchMode,
) -> Vec<(usize, usize)> {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for p in confidence_order(preds) {
        let pred = &preds[p];
        let hit = gts.iter().enumerate().find(|(g, gt)| {
            !taken[*g] && pred.same_labels(gt) && pred.overlaps(gt, iou_threshold, mode)
        });
        if let Some((g, _)) = hit {
            taken[g] = true;
            matches.push((p, g));
        }
    }
    matches
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub matched: usize,
    pub total: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub per_k: BTreeMap<usize, f64>,
    pub mean_per_k: BTreeMap<usize, f64>,
    pub per_predicate: BTreeMap<String, BTreeMap<usize, PredicateRecall>>,
    pub num_images: usize,
    pub total_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub mode: MatchMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            mode: MatchMode::Union,
        }
    }
}

pub type PerImage = BTreeMap<String, Vec<GroundedTriplet>>;

/// Recall over every ground-truth image. Predictions for images without
/// ground truth are ignored; mR@K averages predicates with at least one
/// ground-truth instance.
pub fn recall_at_k(
    preds_per_image: &PerImage,
    gts_per_image: &PerImage,
    ks: &[usize],
    opts: EvalOptions,
) -> Result<RecallReport, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    if !(0.0..1.0).contains(&opts.iou_threshold) {
        return Err(EvalError::InvalidThreshold(opts.iou_threshold));
    }
    let ks: Vec<usize> = ks
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let total_gt: usize = gts_per_image.values().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }

    let mut gt_per_predicate: BTreeMap<String, usize> = BTreeMap::new();
    for t in gts_per_image.values().flatten() {
        *gt_per_predicate.entry(t.relation.clone()).or_default() += 1;
    }

    let empty = Vec::new();
    let mut per_k = BTreeMap::new();
    let mut mean_per_k = BTreeMap::new();
    let mut per_predicate: BTreeMap<String, BTreeMap<usize, PredicateRecall>> = BTreeMap::new();
    for &k in &ks {
        let mut matched = 0usize;
        let mut matched_by_pred: BTreeMap<&str, usize> = BTreeMap::new();
        // BTreeMap iteration gives the ordered reduction by image id
        for (image_id, gts) in gts_per_image {
            let preds = preds_per_image.get(image_id).unwrap_or(&empty);
            let top: Vec<GroundedTriplet> = confidence_order(preds)
                .into_iter()
                .take(k)
                .map(|i| preds[i].clone())
                .collect();
            for (_, g) in match_triplets(&top, gts, opts.iou_threshold, opts.mode) {
                matched += 1;
                *matched_by_pred.entry(gts[g].relation.as_str()).or_default() += 1;
            }
        }
        per_k.insert(k, matched as f64 / total_gt as f64);
        let mut recalls = Vec::new();
        for (pred, &total) in &gt_per_predicate {
            let m = matched_by_pred.get(pred.as_str()).copied().unwrap_or(0);
            let recall = m as f64 / total as f64;
            recalls.push(recall);
            per_predicate.entry(pred.clone()).or_default().insert(
                k,
                PredicateRecall {
                    matched: m,
                    total,
                    recall,
                },
            );
        }
        mean_per_k.insert(k, recalls.iter().sum::<f64>() / recalls.len() as f64);
    }
    Ok(RecallReport {
        per_k,
        mean_per_k,
        per_predicate,
        num_images: gts_per_image.len(),
        total_gt,
    })
}

impl RecallReport {
    /// `{"R@20": .., "R@50": .., "mR@20": ..}` style summary.
    pub fn summary(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.per_k {
            m.insert(format!("R@{k}"), (*v).into());
        }
        for (k, v) in &self.mean_per_k {
            m.insert(format!("mR@{k}"), (*v).into());
        }
        m
    }

    /// Percentages in `R@K ... | mR@K ...` column order.
    pub fn render_table(&self) -> String {
        let headers: Vec<String> = self
            .per_k
            .keys()
            .map(|k| format!("R@{k}"))
            .chain(self.mean_per_k.keys().map(|k| format!("mR@{k}")))
            .collect();
        let values: Vec<String> = self
            .per_k
            .values()
            .chain(self.mean_per_k.values())
            .map(|v| format!("{:.2}", v * 100.0))
            .collect();
        let width = headers
            .iter()
            .chain(&values)
            .map(String::len)
            .max()
            .unwrap_or(0);
        let fmt = |cells: &[String]| {
            cells
                .iter()
                .map(|c| format!("{c:>width$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", fmt(&headers), fmt(&values))
    }
}

/// One line per image: `{"image_id": ..., "triplets": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedImage {
    pub image_id: String,
    pub triplets: Vec<GroundedTriplet>,
}

pub fn read_grounded(path: &Path) -> Result<PerImage, EvalError> {
    let lines: Vec<GroundedImage> = read_jsonl(path)?;
    let mut map = PerImage::new();
    for img in lines {
        map.entry(img.image_id).or_default().extend(img.triplets);
    }
    Ok(map)
}
