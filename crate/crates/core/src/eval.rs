//! COCO-style mask AP@[0.50:0.95].
//!
//! Conventions: 101-point interpolated precision, at most 100 detections per
//! (image, category), categories without ground truth excluded from the
//! mean. Crowd annotations are dropped from matching and from the
//! ground-truth count; no ignore regions are applied.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coco::{validate_results, Annotation, Dataset, Detection};
use crate::error::{Error, Result};
use crate::mask::{BBox, Rle};
use crate::par_map;
use crate::softnms::IouKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_dets_per_image: usize,
    pub iou_kind: IouKind,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            max_dets_per_image: 100,
            iou_kind: IouKind::Mask,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let t = &self.iou_thresholds;
        if t.is_empty() {
            problems.push("at least one IoU threshold is required".to_string());
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) || t.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!("IoU thresholds must be strictly increasing in [0, 1]: {t:?}"));
        }
        if self.recall_points < 2 {
            problems.push(format!("need at least 2 recall points, got {}", self.recall_points));
        }
        if self.max_dets_per_image == 0 {
            problems.push("max detections per image must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Outcome of greedy matching for one (image, category) at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the input detections, score-descending, truncated to `max_dets`.
    pub order: Vec<usize>,
    /// True positive flag per entry of `order`.
    pub is_tp: Vec<bool>,
    /// Matched ground-truth index per entry of `order`.
    pub matched_gt: Vec<Option<usize>>,
    pub unmatched_gt: usize,
}

/// Detection indices sorted by score descending (ties: input index), truncated.
pub fn score_order(dets: &[Detection], max_dets: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order.truncate(max_dets);
    order
}

/// Greedy matching over a precomputed IoU matrix (`ious[d][g]`, rows already
/// in score order). Each detection takes the unmatched ground truth with the
/// highest IoU, provided that IoU is at least `threshold`; equal IoUs go to
/// the lower ground-truth index.
pub fn greedy_match(ious: &[Vec<f64>], num_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; num_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

fn gt_rles(gts: &[&Annotation], height: u32, width: u32) -> Result<Vec<Rle>> {
    gts.iter()
        .map(|a| {
            a.segmentation
                .to_rle(height, width)
                .map_err(|e| Error::invalid(format!("annotation {}: {e}", a.id)))
        })
        .collect()
}

fn iou_matrix(
    order: &[usize],
    dets: &[&Detection],
    gt_rles: &[Rle],
    gt_boxes: &[BBox],
    kind: IouKind,
) -> Result<Vec<Vec<f64>>> {
    order
        .iter()
        .map(|&d| {
            let det = dets[d];
            match kind {
                IouKind::Bbox => Ok(gt_boxes.iter().map(|g| det.bbox.overlap(g).iou()).collect()),
                IouKind::Mask => gt_rles
                    .iter()
                    .map(|g| Ok(det.segmentation.overlap(g)?.iou()))
                    .collect(),
            }
        })
        .collect()
}

/// Matches the detections of one image and category against its ground
/// truth. Crowd annotations in `gts` are ignored.
pub fn match_image_category(
    gts: &[Annotation],
    dets: &[Detection],
    image_height: u32,
    image_width: u32,
    iou_threshold: f64,
    max_dets: usize,
    kind: IouKind,
) -> Result<MatchResult> {
    let gts: Vec<&Annotation> = gts.iter().filter(|a| !a.iscrowd).collect();
    let rles = gt_rles(&gts, image_height, image_width)?;
    let boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
    let order = score_order(dets, max_dets);
    let det_refs: Vec<&Detection> = dets.iter().collect();
    let ious = iou_matrix(&order, &det_refs, &rles, &boxes, kind)?;
    let matched_gt = greedy_match(&ious, gts.len(), iou_threshold);
    let matched = matched_gt.iter().flatten().count();
    Ok(MatchResult {
        is_tp: matched_gt.iter().map(Option::is_some).collect(),
        order,
        matched_gt,
        unmatched_gt: gts.len() - matched,
    })
}

/// Interpolated average precision over `recall_points` evenly spaced recall
/// levels in [0, 1]. `labels` are TP flags in descending score order.
/// Returns `None` when there is no ground truth.
pub fn average_precision(labels: &[bool], num_gt: usize, recall_points: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp_counts = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (i, &hit) in labels.iter().enumerate() {
        tp += hit as usize;
        tp_counts.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // recall level k / (R - 1) is reached once tp * (R - 1) >= k * num_gt
    let steps = (recall_points - 1) as u128;
    let total: f64 = (0..recall_points)
        .map(|k| {
            let need = k as u128 * num_gt as u128;
            let idx = tp_counts.partition_point(|&t| (t as u128) * steps < need);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / recall_points as f64)
}

pub fn average_precision_101(labels: &[bool], num_gt: usize) -> Option<f64> {
    average_precision(labels, num_gt, 101)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub name: String,
    pub num_gt: usize,
    pub num_dets: usize,
    /// `None` when the category has no ground truth.
    pub ap_per_threshold: Option<Vec<f64>>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_kind: IouKind,
    pub iou_thresholds: Vec<f64>,
    pub per_category: BTreeMap<u64, CategoryAp>,
    /// Mean of `ap` over categories with ground truth; 0 when there are none.
    pub mean_ap: f64,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6}  {:<20} {:>6} {:>6}  {:>8}", "id", "category", "gt", "dets", "AP");
        for (id, c) in &self.per_category {
            let ap = c.ap.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{id:>6}  {:<20} {:>6} {:>6}  {ap:>8}", c.name, c.num_gt, c.num_dets);
        }
        let _ = writeln!(s, "mean AP@[0.50:0.95] ({}): {:.4}", self.iou_kind, self.mean_ap);
        s
    }
}

/// One scored detection after per-image matching.
struct Scored {
    score: f64,
    image_id: u64,
    index: usize,
    tp: Vec<bool>,
}

/// Evaluates `dets` against `gt`, producing per-category and mean AP.
pub fn evaluate_map(gt: &Dataset, dets: &[Detection], params: &EvalParams) -> Result<EvalReport> {
    params.validate()?;
    validate_results(dets, gt)?;
    let images = gt.image_index();

    let mut gt_groups: BTreeMap<(u64, u64), Vec<&Annotation>> = BTreeMap::new();
    for a in gt.annotations.iter().filter(|a| !a.iscrowd) {
        gt_groups.entry((a.category_id, a.image_id)).or_default().push(a);
    }
    let mut det_groups: BTreeMap<(u64, u64), Vec<(usize, &Detection)>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        det_groups.entry((d.category_id, d.image_id)).or_default().push((i, d));
    }
    let keys: Vec<(u64, u64)> = gt_groups
        .keys()
        .chain(det_groups.keys())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let thresholds = &params.iou_thresholds;
    let matched = par_map(&keys, |key| -> Result<Vec<Scored>> {
        let (_, image_id) = *key;
        let img = images[&image_id];
        let gts = gt_groups.get(key).map(Vec::as_slice).unwrap_or(&[]);
        let group = det_groups.get(key).map(Vec::as_slice).unwrap_or(&[]);
        let det_refs: Vec<&Detection> = group.iter().map(|(_, d)| *d).collect();

        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_by(|&i, &j| {
            group[j].1.score.total_cmp(&group[i].1.score).then(group[i].0.cmp(&group[j].0))
        });
        order.truncate(params.max_dets_per_image);

        let rles = gt_rles(gts, img.height, img.width)?;
        let boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
        let ious = iou_matrix(&order, &det_refs, &rles, &boxes, params.iou_kind)?;
        let per_threshold: Vec<Vec<Option<usize>>> = thresholds
            .iter()
            .map(|&t| greedy_match(&ious, gts.len(), t))
            .collect();
        Ok(order
            .iter()
            .enumerate()
            .map(|(rank, &d)| Scored {
                score: group[d].1.score,
                image_id,
                index: group[d].0,
                tp: per_threshold.iter().map(|m| m[rank].is_some()).collect(),
            })
            .collect())
    });

    let mut per_cat_scored: BTreeMap<u64, Vec<Scored>> = BTreeMap::new();
    for (key, r) in keys.iter().zip(matched) {
        per_cat_scored.entry(key.0).or_default().extend(r?);
    }
    let mut num_gt: HashMap<u64, usize> = HashMap::new();
    for ((cat, _), g) in &gt_groups {
        *num_gt.entry(*cat).or_default() += g.len();
    }

    let mut per_category = BTreeMap::new();
    let mut present = Vec::new();
    for cat in &gt.categories {
        let n_gt = num_gt.get(&cat.id).copied().unwrap_or(0);
        let mut scored = per_cat_scored.remove(&cat.id).unwrap_or_default();
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.image_id.cmp(&b.image_id))
                .then(a.index.cmp(&b.index))
        });
        let ap_per_threshold: Option<Vec<f64>> = (n_gt > 0).then(|| {
            (0..thresholds.len())
                .map(|t| {
                    let labels: Vec<bool> = scored.iter().map(|s| s.tp[t]).collect();
                    average_precision(&labels, n_gt, params.recall_points).expect("num_gt > 0")
                })
                .collect()
        });
        let ap = ap_per_threshold
            .as_ref()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        if let Some(ap) = ap {
            present.push(ap);
        }
        per_category.insert(
            cat.id,
            CategoryAp {
                name: cat.name.clone(),
                num_gt: n_gt,
                num_dets: scored.len(),
                ap_per_threshold,
                ap,
            },
        );
    }

    let mean_ap = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        iou_kind: params.iou_kind,
        iou_thresholds: thresholds.clone(),
        per_category,
        mean_ap,
    })
}
