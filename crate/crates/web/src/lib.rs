//! Browser bindings for the segkit demo page.
//!
//! Every export takes and returns JSON strings so the page needs no glue
//! beyond `JSON.parse`. The `*_json` functions are the plain-Rust cores and
//! are what the native tests exercise.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::augment::{copy_paste, AnnotatedImage, AugmentParams};
use segkit::coco::Extra;
use segkit::mask::rasterize_polygons;
use segkit::softnms::{soft_nms, IouKind, NmsMethod, NmsParams};
use segkit::{Annotation, BBox, BinaryMask, Detection, ImageInfo, Rle};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type Outcome = Result<String, String>;

fn to_json(v: &impl Serialize) -> Outcome {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Raster {
    height: u32,
    width: u32,
    area: u64,
    bbox: BBox,
    /// Column-major run lengths, starting with background.
    counts: Vec<u32>,
    compressed: String,
}

/// Rasterizes polygons given as `[[x0, y0, x1, y1, ...], ...]`.
pub fn rasterize_json(polygons: &str, height: u32, width: u32) -> Outcome {
    let polys: Vec<Vec<f64>> = serde_json::from_str(polygons).map_err(|e| e.to_string())?;
    let mask = rasterize_polygons(&polys, height, width).map_err(|e| e.to_string())?;
    let rle = Rle::encode(&mask);
    to_json(&Raster {
        height,
        width,
        area: rle.area(),
        bbox: rle.bbox(),
        counts: rle.counts().to_vec(),
        compressed: rle.to_compressed(),
    })
}

#[derive(Deserialize)]
struct BoxIn {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

#[derive(Serialize)]
struct BoxOut {
    /// Position in the input list.
    index: usize,
    score: f64,
}

/// Soft-NMS over boxes `[{x, y, w, h, score}, ...]` using box IoU.
/// Returns the survivors with their decayed scores, best first.
pub fn soft_nms_json(boxes: &str, method: &str, iou_threshold: f64, sigma: f64, score_floor: f64) -> Outcome {
    let boxes: Vec<BoxIn> = serde_json::from_str(boxes).map_err(|e| e.to_string())?;
    let params = NmsParams {
        method: method.parse::<NmsMethod>().map_err(|e| e.to_string())?,
        iou_threshold,
        sigma,
        score_floor,
        iou_kind: IouKind::Bbox,
    };
    let dets: Vec<Detection> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut d = Detection::new(1, 1, b.score, Rle::empty(1, 1));
            d.bbox = BBox::new(b.x, b.y, b.w, b.h);
            // remember the input position through the reordering
            d.extra.insert("index".into(), i.into());
            d
        })
        .collect();
    let kept = soft_nms(&dets, &params).map_err(|e| e.to_string())?;
    let out: Vec<BoxOut> = kept
        .iter()
        .map(|d| BoxOut {
            index: d.extra["index"].as_u64().unwrap_or_default() as usize,
            score: d.score,
        })
        .collect();
    to_json(&out)
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 85, 13],
    [49, 130, 189],
    [49, 163, 84],
    [117, 107, 177],
    [214, 39, 40],
    [140, 86, 75],
];

fn ellipse(h: u32, w: u32, cx: f64, cy: f64, rx: f64, ry: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| {
        let dx = (c as f64 + 0.5 - cx) / rx;
        let dy = (r as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

/// A flat-background image with a few coloured blobs, each annotated.
fn scene(rng: &mut ChaCha8Rng, id: u64, width: u32, height: u32, background: [u8; 3]) -> AnnotatedImage {
    let mut pixels = RgbImage::from_pixel(width, height, Rgb(background));
    let mut annotations = Vec::new();
    for k in 0..rng.gen_range(2..=3u64) {
        let (w, h) = (width as f64, height as f64);
        let m = ellipse(
            height,
            width,
            rng.gen_range(w * 0.2..w * 0.8),
            rng.gen_range(h * 0.2..h * 0.8),
            rng.gen_range(w * 0.08..w * 0.2),
            rng.gen_range(h * 0.1..h * 0.3),
        );
        let colour = PALETTE[rng.gen_range(0..PALETTE.len())];
        for r in 0..height {
            for c in 0..width {
                if m.get(r, c) {
                    pixels.put_pixel(c, r, Rgb(colour));
                }
            }
        }
        annotations.push(Annotation::from_rle(id * 100 + k, id, 1 + k % 3, Rle::encode(&m)));
    }
    AnnotatedImage {
        image: ImageInfo {
            id,
            width,
            height,
            file_name: String::new(),
            extra: Extra::new(),
        },
        pixels: Some(pixels),
        annotations,
    }
}

#[derive(Serialize)]
struct Instance {
    id: u64,
    category_id: u64,
    area: f64,
    counts: Vec<u32>,
    pasted: bool,
}

#[derive(Serialize)]
struct SceneOut {
    width: u32,
    height: u32,
    /// Row-major RGB bytes.
    pixels: Vec<u8>,
    instances: Vec<Instance>,
}

fn scene_out(ai: &AnnotatedImage, original_ids: &[u64]) -> SceneOut {
    SceneOut {
        width: ai.image.width,
        height: ai.image.height,
        pixels: ai.pixels.as_ref().map(|p| p.as_raw().clone()).unwrap_or_default(),
        instances: ai
            .annotations
            .iter()
            .map(|a| Instance {
                id: a.id,
                category_id: a.category_id,
                area: a.area,
                counts: ai.mask(a).map(|m| Rle::encode(&m).counts().to_vec()).unwrap_or_default(),
                pasted: !original_ids.contains(&a.id),
            })
            .collect(),
    }
}

/// Builds a synthetic target and two donors from `seed`, pastes between
/// `paste_min` and `paste_max` donor instances into the target and returns
/// `{before, after, donors}`.
pub fn copy_paste_json(seed: u64, paste_min: u32, paste_max: u32) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (160, 120);
    let target = scene(&mut rng, 1, w, h, [245, 245, 240]);
    let donors = [
        scene(&mut rng, 2, 120, 90, [30, 30, 30]),
        scene(&mut rng, 3, 200, 100, [60, 60, 90]),
    ];
    let params = AugmentParams {
        paste_min,
        paste_max,
        seed,
        ..AugmentParams::default()
    };
    let refs: Vec<&AnnotatedImage> = donors.iter().collect();
    let after = copy_paste(&target, &refs, &params, &mut rng).map_err(|e| e.to_string())?;
    let ids: Vec<u64> = target.annotations.iter().map(|a| a.id).collect();

    #[derive(Serialize)]
    struct Out {
        before: SceneOut,
        after: SceneOut,
        donors: Vec<SceneOut>,
    }
    to_json(&Out {
        before: scene_out(&target, &ids),
        after: scene_out(&after, &ids),
        donors: donors.iter().map(|d| scene_out(d, &[])).collect(),
    })
}

fn js(r: Outcome) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rasterize(polygons: &str, height: u32, width: u32) -> Result<String, JsValue> {
    js(rasterize_json(polygons, height, width))
}

#[wasm_bindgen(js_name = softNms)]
pub fn soft_nms_boxes(boxes: &str, method: &str, iou_threshold: f64, sigma: f64, score_floor: f64) -> Result<String, JsValue> {
    js(soft_nms_json(boxes, method, iou_threshold, sigma, score_floor))
}

#[wasm_bindgen(js_name = copyPaste)]
pub fn copy_paste_demo(seed: u32, paste_min: u32, paste_max: u32) -> Result<String, JsValue> {
    js(copy_paste_json(seed.into(), paste_min, paste_max))
}
