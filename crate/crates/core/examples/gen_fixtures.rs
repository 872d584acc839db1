//! Regenerates the synthetic fixtures in `crates/core/fixtures/`.
//!
//! ```text
//! cargo run -p segkit --example gen_fixtures
//! ```
//!
//! Model A is accurate on `person` and `chair` but weak on `cane`; model B is
//! the reverse. That makes `default=A,cane=B` the obvious routing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::coco::{write_dataset, write_results, Extra};
use segkit::{Annotation, BinaryMask, Category, Dataset, Detection, ImageInfo, Rle, Segmentation};

const CATEGORIES: [&str; 3] = ["person", "cane", "chair"];

fn ellipse(h: u32, w: u32, cx: f64, cy: f64, rx: f64, ry: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| {
        let dx = (c as f64 + 0.5 - cx) / rx;
        let dy = (r as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

fn shifted(m: &BinaryMask, dy: i64, dx: i64) -> BinaryMask {
    m.place(m.height(), m.width(), dy, dx)
}

fn dataset(rng: &mut ChaCha8Rng, n_images: u64, width: u32, height: u32, polygons: bool) -> Dataset {
    let categories = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, name)| Category {
            id: i as u64 + 1,
            name: name.to_string(),
            extra: Extra::new(),
        })
        .collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for id in 1..=n_images {
        images.push(ImageInfo {
            id,
            width,
            height,
            file_name: format!("{id:04}.png"),
            extra: Extra::new(),
        });
        for _ in 0..rng.gen_range(2..=4) {
            let cat = rng.gen_range(1..=3u64);
            let ann_id = annotations.len() as u64 + 1;
            let (w, h) = (width as f64, height as f64);
            let ann = if polygons && cat == 3 {
                // chairs as axis-aligned polygons
                let x0 = rng.gen_range(0.0..w * 0.7);
                let y0 = rng.gen_range(0.0..h * 0.7);
                let x1 = x0 + rng.gen_range(w * 0.1..w * 0.3);
                let y1 = y0 + rng.gen_range(h * 0.1..h * 0.3);
                let poly = vec![x0, y0, x1, y0, x1, y1, x0, y1];
                let rle = Segmentation::Polygons(vec![poly.clone()]).to_rle(height, width).unwrap();
                let mut a = Annotation::from_rle(ann_id, id, cat, rle);
                a.segmentation = Segmentation::Polygons(vec![poly]);
                a
            } else {
                let m = ellipse(
                    height,
                    width,
                    rng.gen_range(w * 0.15..w * 0.85),
                    rng.gen_range(h * 0.15..h * 0.85),
                    rng.gen_range(w * 0.05..w * 0.15),
                    rng.gen_range(h * 0.08..h * 0.25),
                );
                Annotation::from_rle(ann_id, id, cat, Rle::encode(&m))
            };
            annotations.push(ann);
        }
    }
    Dataset {
        images,
        annotations,
        categories,
        extra: Extra::new(),
    }
}

/// Detections for every GT instance: one good hit plus a shifted duplicate.
/// `shift` is the offset of the "good" hit for each category.
fn model(rng: &mut ChaCha8Rng, gt: &Dataset, shift: impl Fn(u64) -> i64, flip: bool) -> Vec<Detection> {
    let mut out = Vec::new();
    for ann in &gt.annotations {
        let img = &gt.images[(ann.image_id - 1) as usize];
        let m = gt.annotation_mask(ann).unwrap();
        let s = shift(ann.category_id);
        let good = shifted(&m, 0, s);
        let dup = shifted(&m, 1, s + 2);
        for (mask, score) in [(good, rng.gen_range(0.7..0.95)), (dup, rng.gen_range(0.3..0.6))] {
            let mask = if flip { mask.hflip() } else { mask };
            if mask.is_empty() {
                continue;
            }
            let score = (score * 1000.0_f64).round() / 1000.0;
            out.push(Detection::new(img.id, ann.category_id, score, Rle::encode(&mask)));
        }
    }
    out
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2021);

    let train = dataset(&mut rng, 4, 96, 64, true);
    let val = dataset(&mut rng, 4, 80, 60, true);
    write_dataset(&train, dir.join("train.json")).unwrap();
    write_dataset(&val, dir.join("val.json")).unwrap();

    let cane = 2;
    let a_shift = |c: u64| if c == cane { 4 } else { 0 };
    let b_shift = |c: u64| if c == cane { 0 } else { 3 };
    write_results(&model(&mut rng, &val, a_shift, false), dir.join("model_a.json")).unwrap();
    write_results(&model(&mut rng, &val, a_shift, true), dir.join("model_a_flip.json")).unwrap();
    write_results(&model(&mut rng, &val, b_shift, false), dir.join("model_b.json")).unwrap();

    let perfect: Vec<Detection> = val
        .annotations
        .iter()
        .map(|a| Detection::new(a.image_id, a.category_id, 1.0, a.segmentation.to_rle(60, 80).unwrap()))
        .collect();
    write_results(&perfect, dir.join("perfect.json")).unwrap();

    let widths: serde_json::Map<String, serde_json::Value> = val
        .images
        .iter()
        .map(|i| (i.id.to_string(), i.width.into()))
        .collect();
    std::fs::write(dir.join("widths.json"), serde_json::to_string_pretty(&widths).unwrap() + "\n").unwrap();

    let augment = serde_json::json!({
        "seed": 7,
        "short-min": 48,
        "short-max": 96,
        "long-cap": 128,
        "crop-width": 96,
        "crop-height": 64,
    });
    std::fs::write(dir.join("augment.json"), serde_json::to_string_pretty(&augment).unwrap() + "\n").unwrap();
    let routing = serde_json::json!({"default": "A", "overrides": {"cane": "B"}, "mode": "route"});
    std::fs::write(dir.join("routing.json"), serde_json::to_string_pretty(&routing).unwrap() + "\n").unwrap();
    println!("fixtures written to {}", dir.display());
}
