//! Score-decay non-maximum suppression.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coco::Detection;
use crate::error::{Error, Result};
use crate::mask::Overlap;
use crate::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMethod {
    /// Classic NMS: overlapping detections are removed.
    Hard,
    /// `s *= 1 - iou` when `iou > iou_threshold`.
    Linear,
    /// `s *= exp(-iou^2 / sigma)`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Mask,
    Bbox,
}

macro_rules! str_enum {
    ($ty:ident { $($name:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::invalid(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

str_enum!(NmsMethod { "hard" => Hard, "linear" => Linear, "gaussian" => Gaussian });
str_enum!(IouKind { "mask" => Mask, "bbox" => Bbox });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsParams {
    pub method: NmsMethod,
    /// Overlap threshold for the hard and linear methods.
    pub iou_threshold: f64,
    /// Gaussian width; must be positive.
    pub sigma: f64,
    /// Detections whose score drops below this are discarded.
    pub score_floor: f64,
    pub iou_kind: IouKind,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams {
            method: NmsMethod::Gaussian,
            iou_threshold: 0.5,
            sigma: 0.5,
            score_floor: 0.001,
            iou_kind: IouKind::Mask,
        }
    }
}

impl NmsParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            problems.push(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            problems.push(format!("iou threshold {} outside [0, 1]", self.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            problems.push(format!("score floor {} outside [0, 1]", self.score_floor));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// New score of a detection overlapping an already selected one.
    pub fn decay(&self, score: f64, overlap: &Overlap) -> f64 {
        let iou = overlap.iou();
        match self.method {
            NmsMethod::Hard if iou > self.iou_threshold => 0.0,
            NmsMethod::Linear if iou > self.iou_threshold => overlap.scale_by_complement(score),
            NmsMethod::Gaussian => score * (-(iou * iou) / self.sigma).exp(),
            _ => score,
        }
    }
}

/// Overlap between two detections of the same image.
pub fn detection_overlap(a: &Detection, b: &Detection, kind: IouKind) -> Result<Overlap> {
    match kind {
        IouKind::Bbox => Ok(a.bbox.overlap(&b.bbox)),
        IouKind::Mask => {
            let boxes = a.segmentation.bbox().overlap(&b.segmentation.bbox());
            if boxes.intersection == 0.0 {
                let union = (a.segmentation.area() + b.segmentation.area()) as f64;
                return Ok(Overlap {
                    intersection: 0.0,
                    union,
                });
            }
            a.segmentation.overlap(&b.segmentation)
        }
    }
}

/// Total order used before suppression: score descending, then geometry,
/// so the result does not depend on input order.
pub(crate) fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x.total_cmp(&b.bbox.x))
        .then_with(|| a.bbox.y.total_cmp(&b.bbox.y))
        .then_with(|| a.bbox.w.total_cmp(&b.bbox.w))
        .then_with(|| a.bbox.h.total_cmp(&b.bbox.h))
        .then_with(|| a.segmentation.cmp(&b.segmentation))
}

/// Soft-NMS over detections sharing one image and one category.
///
/// Repeatedly emits the highest-scoring remaining detection and decays the
/// others against it. Detections whose score falls below `score_floor`, or
/// reaches zero, are dropped. Output is sorted by final score, descending.
pub fn soft_nms(dets: &[Detection], params: &NmsParams) -> Result<Vec<Detection>> {
    params.validate()?;
    let Some(first) = dets.first() else {
        return Ok(Vec::new());
    };
    if let Some(d) = dets
        .iter()
        .find(|d| (d.image_id, d.category_id) != (first.image_id, first.category_id))
    {
        return Err(Error::invalid(format!(
            "soft_nms needs one image and category; got ({}, {}) and ({}, {})",
            first.image_id, first.category_id, d.image_id, d.category_id
        )));
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| canonical_cmp(&dets[i], &dets[j]).then(i.cmp(&j)));

    // (canonical rank, current score), in canonical order
    let mut live: Vec<(usize, f64)> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| (rank, dets[i].score))
        .filter(|&(_, s)| s > 0.0 && s >= params.score_floor)
        .collect();

    let mut out = Vec::with_capacity(live.len());
    while !live.is_empty() {
        // highest current score; ties go to the earlier canonical rank
        let best = (0..live.len())
            .min_by(|&x, &y| {
                live[y]
                    .1
                    .total_cmp(&live[x].1)
                    .then(live[x].0.cmp(&live[y].0))
            })
            .expect("non-empty");
        let (rank, score) = live.swap_remove(best);
        let chosen = &dets[order[rank]];
        for (other_rank, other_score) in live.iter_mut() {
            let ov = detection_overlap(chosen, &dets[order[*other_rank]], params.iou_kind)?;
            *other_score = params.decay(*other_score, &ov);
        }
        live.retain(|&(_, s)| s > 0.0 && s >= params.score_floor);

        let mut kept = chosen.clone();
        kept.score = score;
        out.push(kept);
    }
    Ok(out)
}

/// Groups detections by `(image_id, category_id)` and runs [`soft_nms`] on
/// each group. Groups are emitted in ascending key order.
pub fn soft_nms_grouped(dets: &[Detection], params: &NmsParams) -> Result<Vec<Detection>> {
    params.validate()?;
    let mut groups: BTreeMap<(u64, u64), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups
            .entry((d.image_id, d.category_id))
            .or_default()
            .push(d.clone());
    }
    let groups: Vec<Vec<Detection>> = groups.into_values().collect();
    let results = par_map(&groups, |g| soft_nms(g, params));
    let mut out = Vec::with_capacity(dets.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
