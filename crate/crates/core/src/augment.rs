//! Training-time augmentation: scale jitter, crop, pad and flip, followed by
//! Copy-Paste of instances between images.
//!
//! All randomness comes from the caller's RNG; the dataset driver seeds a
//! ChaCha8 stream per image from `seed ^ image_id`, so output does not
//! depend on thread count.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{Annotation, Dataset, ImageInfo, Segmentation};
use crate::error::{Error, Result};
use crate::mask::{nearest_index_map, BinaryMask, Rle};
use crate::par_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub short_side_min: u32,
    pub short_side_max: u32,
    /// The long side is never scaled beyond this.
    pub long_side_cap: u32,
    pub crop_width: u32,
    pub crop_height: u32,
    pub hflip_prob: f64,
    pub paste_min: u32,
    pub paste_max: u32,
    /// Occluded annotations with fewer remaining pixels are removed.
    pub min_remaining_area: u64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            short_side_min: 720,
            short_side_max: 1620,
            long_side_cap: 1920,
            crop_width: 1920,
            crop_height: 1080,
            hflip_prob: 0.5,
            paste_min: 1,
            paste_max: 3,
            min_remaining_area: 1,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.short_side_min == 0 || self.short_side_min > self.short_side_max {
            problems.push(format!(
                "short side range must satisfy 0 < min <= max, got [{}, {}]",
                self.short_side_min, self.short_side_max
            ));
        }
        if self.long_side_cap == 0 {
            problems.push("long side cap must be positive".to_string());
        }
        if self.crop_width == 0 || self.crop_height == 0 {
            problems.push(format!(
                "crop size must be positive, got {}x{}",
                self.crop_width, self.crop_height
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            problems.push(format!("flip probability {} outside [0, 1]", self.hflip_prob));
        }
        if self.paste_min > self.paste_max {
            problems.push(format!(
                "paste count range [{}, {}] is empty",
                self.paste_min, self.paste_max
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// An image with its annotations and, in pixel mode, its RGB buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image: ImageInfo,
    pub pixels: Option<RgbImage>,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedImage {
    pub fn mask(&self, ann: &Annotation) -> Result<BinaryMask> {
        ann.segmentation
            .to_mask(self.image.height, self.image.width)
            .map_err(|e| Error::invalid(format!("annotation {}: {e}", ann.id)))
    }
}

/// Concrete outcome of the random draws of [`geometric_augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryPlan {
    pub scale: f64,
    pub scaled_width: u32,
    pub scaled_height: u32,
    /// Top-left of the crop window in scaled coordinates.
    pub crop_x: u32,
    pub crop_y: u32,
    pub flip: bool,
}

/// Scale taking the short side to `short_target`, reduced if the long side
/// would exceed `long_cap`.
pub fn scale_factor(width: u32, height: u32, short_target: u32, long_cap: u32) -> f64 {
    let (short, long) = (width.min(height) as f64, width.max(height) as f64);
    (short_target as f64 / short).min(long_cap as f64 / long)
}

impl GeometryPlan {
    /// Plan for a given short-side draw; crop offset and flip are drawn from `rng`.
    pub fn for_short_side(
        width: u32,
        height: u32,
        short_target: u32,
        params: &AugmentParams,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = scale_factor(width, height, short_target, params.long_side_cap);
        let scaled_width = ((width as f64 * scale).round() as u32).max(1);
        let scaled_height = ((height as f64 * scale).round() as u32).max(1);
        let crop_x = rng.gen_range(0..=scaled_width.saturating_sub(params.crop_width));
        let crop_y = rng.gen_range(0..=scaled_height.saturating_sub(params.crop_height));
        let flip = rng.gen_bool(params.hflip_prob);
        GeometryPlan {
            scale,
            scaled_width,
            scaled_height,
            crop_x,
            crop_y,
            flip,
        }
    }

    pub fn draw(width: u32, height: u32, params: &AugmentParams, rng: &mut impl Rng) -> Self {
        let short_target = rng.gen_range(params.short_side_min..=params.short_side_max);
        Self::for_short_side(width, height, short_target, params, rng)
    }
}

/// Resamples a source grid into the output frame: resize, crop, zero-pad, flip.
struct Resampler {
    rows: Vec<Option<u32>>,
    cols: Vec<Option<u32>>,
}

impl Resampler {
    fn new(width: u32, height: u32, plan: &GeometryPlan, out_w: u32, out_h: u32) -> Self {
        let row_map = nearest_index_map(height, plan.scaled_height);
        let col_map = nearest_index_map(width, plan.scaled_width);
        let rows = (0..out_h)
            .map(|r| row_map.get((r + plan.crop_y) as usize).copied())
            .collect();
        let cols = (0..out_w)
            .map(|c| {
                let c = if plan.flip { out_w - 1 - c } else { c };
                col_map.get((c + plan.crop_x) as usize).copied()
            })
            .collect();
        Resampler { rows, cols }
    }

    fn mask(&self, src: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(self.rows.len() as u32, self.cols.len() as u32, |r, c| {
            match (self.rows[r as usize], self.cols[c as usize]) {
                (Some(sr), Some(sc)) => src.get(sr, sc),
                _ => false,
            }
        })
    }

    fn pixels(&self, src: &RgbImage) -> RgbImage {
        RgbImage::from_fn(self.cols.len() as u32, self.rows.len() as u32, |c, r| {
            match (self.rows[r as usize], self.cols[c as usize]) {
                (Some(sr), Some(sc)) => *src.get_pixel(sc, sr),
                _ => Rgb([0, 0, 0]),
            }
        })
    }
}

fn with_mask(ann: &Annotation, mask: &BinaryMask) -> Annotation {
    let mut out = ann.clone();
    out.segmentation = Segmentation::Rle(Rle::encode(mask));
    out.refresh_geometry();
    out
}

/// Applies a drawn plan. Output is always `crop_width x crop_height`;
/// annotations left empty are dropped, the rest get RLE masks with fresh
/// area and bbox.
pub fn apply_geometry(ai: &AnnotatedImage, plan: &GeometryPlan, params: &AugmentParams) -> Result<AnnotatedImage> {
    let (w, h) = (ai.image.width, ai.image.height);
    let (out_w, out_h) = (params.crop_width, params.crop_height);
    let sampler = Resampler::new(w, h, plan, out_w, out_h);

    let mut annotations = Vec::with_capacity(ai.annotations.len());
    for ann in &ai.annotations {
        let m = sampler.mask(&ai.mask(ann)?);
        if !m.is_empty() {
            annotations.push(with_mask(ann, &m));
        }
    }
    let pixels = match &ai.pixels {
        Some(p) if p.dimensions() != (w, h) => {
            return Err(Error::Dimension(format!(
                "image {} pixels are {}x{}, metadata says {w}x{h}",
                ai.image.id,
                p.width(),
                p.height()
            )))
        }
        Some(p) => Some(sampler.pixels(p)),
        None => None,
    };
    Ok(AnnotatedImage {
        image: ImageInfo {
            width: out_w,
            height: out_h,
            ..ai.image.clone()
        },
        pixels,
        annotations,
    })
}

pub fn geometric_augment(ai: &AnnotatedImage, params: &AugmentParams, rng: &mut impl Rng) -> Result<AnnotatedImage> {
    params.validate()?;
    let plan = GeometryPlan::draw(ai.image.width, ai.image.height, params, rng);
    apply_geometry(ai, &plan, params)
}

/// Pastes `k ~ U[paste_min, paste_max]` donor instances into `target`.
///
/// Instances are drawn uniformly from all non-crowd, non-empty donor
/// annotations and placed at a uniform position with their bounding box
/// fully inside the frame (a box larger than the frame is clipped). Later
/// pastes occlude earlier ones and every pre-existing annotation loses the
/// pasted pixels. Annotations left with fewer than `min_remaining_area`
/// pixels, or none, are removed. New annotations get ids above any id in
/// `target` or `donors`.
pub fn copy_paste(
    target: &AnnotatedImage,
    donors: &[&AnnotatedImage],
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<AnnotatedImage> {
    params.validate()?;
    let k = rng.gen_range(params.paste_min..=params.paste_max);
    if k == 0 {
        return Ok(target.clone());
    }

    let pool: Vec<(usize, usize)> = donors
        .iter()
        .enumerate()
        .flat_map(|(d, img)| {
            img.annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| !a.iscrowd && a.area > 0.0)
                .map(move |(i, _)| (d, i))
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid(format!(
            "donor pool for image {} is empty ({} donor images, no pasteable instances)",
            target.image.id,
            donors.len()
        )));
    }

    let (w, h) = (target.image.width, target.image.height);
    let mut pixels = target.pixels.clone();
    let mut pasted: Vec<(Annotation, BinaryMask)> = Vec::with_capacity(k as usize);
    let mut next_id = target
        .annotations
        .iter()
        .chain(donors.iter().flat_map(|d| d.annotations.iter()))
        .map(|a| a.id)
        .max()
        .map_or(1, |m| m + 1);

    for _ in 0..k {
        let (d, i) = pool[rng.gen_range(0..pool.len())];
        let donor = donors[d];
        let ann = &donor.annotations[i];
        let src = donor.mask(ann)?;
        let b = src.bbox();
        let (bx, by) = (b.x as u32, b.y as u32);
        let (pw, ph) = ((b.w as u32).min(w), (b.h as u32).min(h));
        if pw == 0 || ph == 0 {
            continue;
        }
        let x = rng.gen_range(0..=w - pw);
        let y = rng.gen_range(0..=h - ph);

        let mut m = BinaryMask::new(h, w);
        for r in 0..ph {
            for c in 0..pw {
                if src.get(by + r, bx + c) {
                    m.set(y + r, x + c, true);
                }
            }
        }
        match (&mut pixels, &donor.pixels) {
            (Some(dst), Some(src_px)) => {
                for r in 0..ph {
                    for c in 0..pw {
                        if m.get(y + r, x + c) {
                            dst.put_pixel(x + c, y + r, *src_px.get_pixel(bx + c, by + r));
                        }
                    }
                }
            }
            (Some(_), None) => {
                return Err(Error::invalid(format!(
                    "donor image {} has no pixels but target {} does",
                    donor.image.id, target.image.id
                )))
            }
            _ => {}
        }

        for (_, earlier) in pasted.iter_mut() {
            earlier.subtract(&m)?;
        }
        let mut new_ann = Annotation::from_rle(next_id, target.image.id, ann.category_id, Rle::empty(h, w));
        new_ann.extra = ann.extra.clone();
        next_id += 1;
        pasted.push((new_ann, m));
    }

    let mut occluder = BinaryMask::new(h, w);
    for (_, m) in &pasted {
        occluder.union_with(m)?;
    }
    let keep = |m: &BinaryMask| {
        let area = m.area();
        area > 0 && area >= params.min_remaining_area
    };

    let mut annotations = Vec::with_capacity(target.annotations.len() + pasted.len());
    for ann in &target.annotations {
        let mut m = target.mask(ann)?;
        m.subtract(&occluder)?;
        if keep(&m) {
            annotations.push(with_mask(ann, &m));
        }
    }
    for (ann, m) in &pasted {
        if keep(m) {
            annotations.push(with_mask(ann, m));
        }
    }
    Ok(AnnotatedImage {
        image: target.image.clone(),
        pixels,
        annotations,
    })
}

/// Per-image RNG for the dataset driver; `stream` separates the geometric
/// and paste stages.
pub fn image_rng(seed: u64, image_id: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ image_id);
    rng.set_stream(stream);
    rng
}

/// Splits a dataset into per-image units. `pixels`, when given, must be
/// aligned with `dataset.images`.
pub fn annotated_images(dataset: &Dataset, pixels: Option<Vec<RgbImage>>) -> Result<Vec<AnnotatedImage>> {
    let mut pixels = match pixels {
        Some(p) if p.len() != dataset.images.len() => {
            return Err(Error::invalid(format!(
                "{} pixel buffers for {} images",
                p.len(),
                dataset.images.len()
            )))
        }
        Some(p) => p.into_iter().map(Some).collect(),
        None => vec![None; dataset.images.len()],
    };
    Ok(dataset
        .images
        .iter()
        .zip(pixels.iter_mut())
        .map(|(img, px)| AnnotatedImage {
            image: img.clone(),
            pixels: px.take(),
            annotations: dataset
                .annotations
                .iter()
                .filter(|a| a.image_id == img.id)
                .cloned()
                .collect(),
        })
        .collect())
}

/// Runs the full chain on every image: geometric augmentation, then
/// Copy-Paste with donors drawn from all other (already augmented) images.
/// Returns the augmented images in dataset order.
pub fn augment_images(images: &[AnnotatedImage], params: &AugmentParams) -> Result<Vec<AnnotatedImage>> {
    params.validate()?;
    let geometric: Vec<AnnotatedImage> = par_map(images, |ai| {
        geometric_augment(ai, params, &mut image_rng(params.seed, ai.image.id, 0))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let indices: Vec<usize> = (0..geometric.len()).collect();
    par_map(&indices, |&i| {
        let target = &geometric[i];
        let donors: Vec<&AnnotatedImage> = geometric
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, d)| d)
            .collect();
        copy_paste(target, &donors, params, &mut image_rng(params.seed, target.image.id, 1))
    })
    .into_iter()
    .collect()
}

/// Reassembles a dataset from augmented images, renumbering annotation ids from 1.
pub fn to_dataset(template: &Dataset, images: &[AnnotatedImage]) -> Dataset {
    let mut annotations = Vec::new();
    for ai in images {
        for a in &ai.annotations {
            let mut a = a.clone();
            a.id = annotations.len() as u64 + 1;
            annotations.push(a);
        }
    }
    Dataset {
        images: images.iter().map(|ai| ai.image.clone()).collect(),
        annotations,
        categories: template.categories.clone(),
        extra: template.extra.clone(),
    }
}
