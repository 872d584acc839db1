//! Independent reference implementations and random generators shared by
//! the integration and acceptance tests. Nothing here calls into the
//! crate's algorithms; only its data types are used. The `checks` submodule
//! holds the properties that compare the crate against these.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::coco::{Annotation, Category, Dataset, Detection, Extra, ImageInfo, Segmentation};
use segkit::{BinaryMask, Rle};

/// Returns `Err(format!(...))` from the enclosing check unless `$cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

pub mod checks;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense decode by walking the runs one pixel at a time (column-major).
pub fn naive_decode(rle: &Rle) -> Vec<Vec<bool>> {
    let (h, w) = (rle.height() as usize, rle.width() as usize);
    let mut grid = vec![vec![false; w]; h];
    let mut p = 0usize;
    let mut fg = false;
    for &n in rle.counts() {
        for _ in 0..n {
            grid[p % h][p / h] = fg;
            p += 1;
        }
        fg = !fg;
    }
    grid
}

/// Classic crossing-number point-in-polygon test.
pub fn point_in_polygon(poly: &[f64], x: f64, y: f64) -> bool {
    let n = poly.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
        let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Pixel-centre rasterization of a polygon union, one pixel at a time.
pub fn brute_rasterize(polys: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<bool>> {
    let mut grid = vec![vec![false; w]; h];
    for (r, row) in grid.iter_mut().enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            *px = polys.iter().any(|p| point_in_polygon(p, x, y));
        }
    }
    grid
}

pub fn grid_of(mask: &BinaryMask) -> Vec<Vec<bool>> {
    (0..mask.height())
        .map(|r| (0..mask.width()).map(|c| mask.get(r, c)).collect())
        .collect()
}

pub fn grid_area(g: &[Vec<bool>]) -> usize {
    g.iter().flatten().filter(|&&b| b).count()
}

pub fn grid_iou(a: &[Vec<bool>], b: &[Vec<bool>]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn segmentation_grid(seg: &Segmentation, h: usize, w: usize) -> Vec<Vec<bool>> {
    match seg {
        Segmentation::Rle(r) => naive_decode(r),
        Segmentation::Polygons(p) => brute_rasterize(p, h, w),
    }
}

/// Classic greedy NMS: keep a detection unless it overlaps a kept one by more than `nt`.
pub fn naive_greedy_nms(dets: &[Detection], nt: f64) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<&Detection> = Vec::new();
    for i in idx {
        let g = naive_decode(&dets[i].segmentation);
        if kept
            .iter()
            .all(|k| grid_iou(&naive_decode(&k.segmentation), &g) <= nt)
        {
            kept.push(&dets[i]);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Straightforward COCO-style evaluator: greedy matching per image and
/// category, global score sort, precision envelope evaluated as the maximum
/// precision over all prefixes whose recall reaches each of 101 levels.
pub fn brute_force_map(gt: &Dataset, dets: &[Detection]) -> (f64, Vec<(u64, Option<f64>)>) {
    let thresholds = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
    let mut per_cat = Vec::new();
    let mut present = Vec::new();

    for cat in &gt.categories {
        let num_gt = gt
            .annotations
            .iter()
            .filter(|a| a.category_id == cat.id && !a.iscrowd)
            .count();
        if num_gt == 0 {
            per_cat.push((cat.id, None));
            continue;
        }
        let mut ap_sum = 0.0;
        for &t in &thresholds {
            // (score, image_id, input index, tp)
            let mut pooled: Vec<(f64, u64, usize, bool)> = Vec::new();
            for img in &gt.images {
                let (h, w) = (img.height as usize, img.width as usize);
                let gts: Vec<Vec<Vec<bool>>> = gt
                    .annotations
                    .iter()
                    .filter(|a| a.image_id == img.id && a.category_id == cat.id && !a.iscrowd)
                    .map(|a| segmentation_grid(&a.segmentation, h, w))
                    .collect();
                let mut mine: Vec<usize> = (0..dets.len())
                    .filter(|&i| dets[i].image_id == img.id && dets[i].category_id == cat.id)
                    .collect();
                // selection sort: highest score first, lowest index on ties
                let mut ordered = Vec::new();
                while !mine.is_empty() {
                    let mut best = 0;
                    for k in 1..mine.len() {
                        let (a, b) = (mine[k], mine[best]);
                        if dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b) {
                            best = k;
                        }
                    }
                    ordered.push(mine.remove(best));
                }
                ordered.truncate(100);

                let mut taken = vec![false; gts.len()];
                for d in ordered {
                    let g = naive_decode(&dets[d].segmentation);
                    let mut best: Option<usize> = None;
                    let mut best_iou = -1.0;
                    for (gi, gm) in gts.iter().enumerate() {
                        if taken[gi] {
                            continue;
                        }
                        let iou = grid_iou(&g, gm);
                        if iou >= t && iou > best_iou {
                            best_iou = iou;
                            best = Some(gi);
                        }
                    }
                    if let Some(gi) = best {
                        taken[gi] = true;
                    }
                    pooled.push((dets[d].score, img.id, d, best.is_some()));
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut prefix = Vec::new(); // (tp, n)
            let mut tp = 0usize;
            for (n, p) in pooled.iter().enumerate() {
                tp += p.3 as usize;
                prefix.push((tp, n + 1));
            }
            let mut total = 0.0;
            for k in 0..=100usize {
                let mut best = 0.0f64;
                for &(tp, n) in &prefix {
                    if tp * 100 >= k * num_gt {
                        best = best.max(tp as f64 / n as f64);
                    }
                }
                total += best;
            }
            ap_sum += total / 101.0;
        }
        let ap = ap_sum / thresholds.len() as f64;
        present.push(ap);
        per_cat.push((cat.id, Some(ap)));
    }
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (mean, per_cat)
}

pub fn rect_mask(h: u32, w: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| r >= y0 && r < y1 && c >= x0 && c < x1)
}

/// A random rectangle-ish blob inside an `h x w` frame, never empty.
pub fn random_blob(rng: &mut impl Rng, h: u32, w: u32) -> BinaryMask {
    let x0 = rng.gen_range(0..w);
    let y0 = rng.gen_range(0..h);
    let x1 = rng.gen_range(x0 + 1..=w);
    let y1 = rng.gen_range(y0 + 1..=h);
    let mut m = rect_mask(h, w, x0, y0, x1, y1);
    // knock out a few pixels but keep the top-left one
    for _ in 0..rng.gen_range(0..3) {
        let r = rng.gen_range(y0..y1);
        let c = rng.gen_range(x0..x1);
        if (r, c) != (y0, x0) {
            m.set(r, c, false);
        }
    }
    m
}

/// Perturbs a mask by shifting it and toggling a few pixels.
pub fn jitter(rng: &mut impl Rng, m: &BinaryMask) -> BinaryMask {
    let dx = rng.gen_range(-1i64..=1);
    let dy = rng.gen_range(-1i64..=1);
    let mut out = m.place(m.height(), m.width(), dy, dx);
    for _ in 0..rng.gen_range(0..3) {
        let r = rng.gen_range(0..m.height());
        let c = rng.gen_range(0..m.width());
        out.set(r, c, !out.get(r, c));
    }
    if out.is_empty() {
        out.set(0, 0, true);
    }
    out
}

pub fn category(id: u64, name: &str) -> Category {
    Category {
        id,
        name: name.to_string(),
        extra: Extra::new(),
    }
}

pub fn image(id: u64, width: u32, height: u32) -> ImageInfo {
    ImageInfo {
        id,
        width,
        height,
        file_name: format!("img_{id}.png"),
        extra: Extra::new(),
    }
}

/// Tiny random dataset (<= 5 images, <= 4 categories) plus <= 10 detections.
pub fn random_tiny_case(seed: u64) -> (Dataset, Vec<Detection>) {
    let mut rng = rng(seed);
    let n_images = rng.gen_range(1..=5u64);
    let n_cats = rng.gen_range(1..=4u64);
    let images: Vec<ImageInfo> = (1..=n_images)
        .map(|id| image(id * 10, rng.gen_range(4..=10), rng.gen_range(4..=10)))
        .collect();
    let categories: Vec<Category> = (1..=n_cats).map(|id| category(id, &format!("c{id}"))).collect();

    let mut annotations = Vec::new();
    for img in &images {
        for _ in 0..rng.gen_range(0..=3) {
            let cat = rng.gen_range(1..=n_cats);
            let m = random_blob(&mut rng, img.height, img.width);
            let id = annotations.len() as u64 + 1;
            let mut a = if rng.gen_bool(0.3) {
                // polygon form of the blob's bounding rectangle
                let b = m.bbox();
                let mut a = Annotation::from_rle(id, img.id, cat, Rle::encode(&m));
                a.segmentation = Segmentation::Polygons(vec![vec![
                    b.x, b.y, b.x + b.w, b.y, b.x + b.w, b.y + b.h, b.x, b.y + b.h,
                ]]);
                a
            } else {
                Annotation::from_rle(id, img.id, cat, Rle::encode(&m))
            };
            a.iscrowd = rng.gen_bool(0.1);
            annotations.push(a);
        }
    }

    let ds = Dataset {
        images,
        annotations,
        categories,
        extra: Extra::new(),
    };
    let dets = random_detections(&mut rng, &ds, 10);
    (ds, dets)
}

/// Up to `max` detections on `ds`, mostly jittered copies of its annotations.
pub fn random_detections(rng: &mut impl Rng, ds: &Dataset, max: usize) -> Vec<Detection> {
    let (images, annotations) = (&ds.images, &ds.annotations);
    let n_cats = ds.categories.len() as u64;
    let n_dets = rng.gen_range(0..=max);
    let mut dets = Vec::new();
    for _ in 0..n_dets {
        let near_gt = !annotations.is_empty() && rng.gen_bool(0.7);
        let (img, cat, m) = if near_gt {
            let a = &annotations[rng.gen_range(0..annotations.len())];
            let img = images.iter().find(|i| i.id == a.image_id).unwrap();
            let g = segmentation_grid(&a.segmentation, img.height as usize, img.width as usize);
            let base = BinaryMask::from_fn(img.height, img.width, |r, c| g[r as usize][c as usize]);
            let cat = if rng.gen_bool(0.85) { a.category_id } else { rng.gen_range(1..=n_cats) };
            (img, cat, jitter(rng, &base))
        } else {
            let img = &images[rng.gen_range(0..images.len())];
            (img, rng.gen_range(1..=n_cats), random_blob(rng, img.height, img.width))
        };
        // coarse scores so ties happen
        let score = rng.gen_range(1..=10) as f64 / 10.0;
        dets.push(Detection::new(img.id, cat, score, Rle::encode(&m)));
    }
    dets
}

/// Random detections of one image and category on an `h x w` frame.
pub fn random_group(rng: &mut impl Rng, n: usize, h: u32, w: u32) -> Vec<Detection> {
    let anchors: Vec<BinaryMask> = (0..3).map(|_| random_blob(rng, h, w)).collect();
    (0..n)
        .map(|_| {
            let m = if rng.gen_bool(0.7) {
                let k = rng.gen_range(0..anchors.len());
                jitter(rng, &anchors[k])
            } else {
                random_blob(rng, h, w)
            };
            Detection::new(1, 1, rng.gen_range(0.01..1.0), Rle::encode(&m))
        })
        .collect()
}
