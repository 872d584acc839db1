//! Horizontal-flip test-time augmentation.
//!
//! Detections produced on a mirrored image are mapped back to the original
//! frame, then all branches are concatenated and passed through Soft-NMS.

use std::collections::{BTreeMap, HashMap};

use crate::coco::Detection;
use crate::error::{Error, Result};
use crate::par_map;
use crate::softnms::{soft_nms_grouped, NmsParams};

/// Mirrors every detection's mask and box back into original-image coordinates.
pub fn unflip_detections(dets: &[Detection], image_width: u32) -> Result<Vec<Detection>> {
    dets.iter()
        .map(|d| {
            if d.segmentation.width() != image_width {
                return Err(Error::Dimension(format!(
                    "detection on image {} has mask width {}, image width is {image_width}",
                    d.image_id,
                    d.segmentation.width()
                )));
            }
            Ok(Detection {
                segmentation: d.segmentation.hflip(),
                bbox: d.bbox.hflip(image_width as f64),
                ..d.clone()
            })
        })
        .collect()
}

/// Concatenates detection branches of one image and suppresses duplicates per category.
pub fn fuse_detections(branches: &[Vec<Detection>], params: &NmsParams) -> Result<Vec<Detection>> {
    let mut all = branches.iter().flatten();
    if let Some(first) = all.next() {
        if let Some(other) = all.find(|d| d.image_id != first.image_id) {
            return Err(Error::invalid(format!(
                "fuse_detections needs a single image; got {} and {}",
                first.image_id, other.image_id
            )));
        }
    }
    let merged: Vec<Detection> = branches.iter().flatten().cloned().collect();
    soft_nms_grouped(&merged, params)
}

/// File-level merge: unflips `flipped` using per-image widths and fuses it
/// with `original`, image by image. Output is ordered by image id.
pub fn merge_flip_results(
    original: &[Detection],
    flipped: &[Detection],
    widths: &HashMap<u64, u32>,
    params: &NmsParams,
) -> Result<Vec<Detection>> {
    let mut per_image: BTreeMap<u64, (Vec<Detection>, Vec<Detection>)> = BTreeMap::new();
    for d in original {
        per_image.entry(d.image_id).or_default().0.push(d.clone());
    }
    for d in flipped {
        per_image.entry(d.image_id).or_default().1.push(d.clone());
    }
    let jobs: Vec<(u64, Vec<Detection>, Vec<Detection>)> = per_image
        .into_iter()
        .map(|(id, (o, f))| (id, o, f))
        .collect();
    let fused = par_map(&jobs, |(id, orig, flip)| {
        let unflipped = if flip.is_empty() {
            Vec::new()
        } else {
            let width = *widths
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no width known for image {id}")))?;
            unflip_detections(flip, width)?
        };
        fuse_detections(&[orig.clone(), unflipped], params)
    });
    let mut out = Vec::new();
    for r in fused {
        out.extend(r?);
    }
    Ok(out)
}
