//! Property checks used by both the acceptance suite and the focused
//! integration tests. Each returns a description of the first violation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::Rng;
use segkit::augment::{copy_paste, geometric_augment, AnnotatedImage, AugmentParams};
use segkit::ensemble::{integrate_by_category, Mode, RoutingTable, Source};
use segkit::eval::{evaluate_map, EvalParams};
use segkit::softnms::{soft_nms, NmsMethod, NmsParams};
use segkit::swa::{average_snapshots, Tensor, WeightSnapshot};
use segkit::{Annotation, BinaryMask, Rle, Segmentation};

use super::*;

pub type Check = Result<(), String>;

/// `evaluate_map` against the brute-force evaluator on one random case.
pub fn evaluator_matches_oracle(seed: u64) -> Check {
    let (gt, dets) = random_tiny_case(seed);
    let report = evaluate_map(&gt, &dets, &EvalParams::default()).map_err(|e| format!("seed {seed}: {e}"))?;
    let (mean, per_cat) = brute_force_map(&gt, &dets);
    ensure!(
        (report.mean_ap - mean).abs() <= 1e-9,
        "seed {seed}: mean AP {} vs oracle {mean}",
        report.mean_ap
    );
    for (id, want) in per_cat {
        let got = report.per_category[&id].ap;
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) if (g - w).abs() <= 1e-9 => {}
            _ => return Err(format!("seed {seed}: category {id} AP {got:?} vs oracle {want:?}")),
        }
    }
    Ok(())
}

/// Hard Soft-NMS with a zero floor against classic greedy NMS.
pub fn hard_nms_matches_greedy(seed: u64) -> Check {
    let mut rng = rng(seed);
    let n = rng.gen_range(1..=12);
    let dets = random_group(&mut rng, n, 12, 12);
    let nt = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
    let params = NmsParams {
        method: NmsMethod::Hard,
        iou_threshold: nt,
        score_floor: 0.0,
        ..NmsParams::default()
    };
    let got = soft_nms(&dets, &params).map_err(|e| e.to_string())?;
    let want = naive_greedy_nms(&dets, nt);
    ensure!(got == want, "seed {seed}: soft_nms kept {} detections, greedy NMS kept {}", got.len(), want.len());
    Ok(())
}

fn random_annotated(rng: &mut impl Rng, id: u64, first_ann: u64, min_anns: u64) -> AnnotatedImage {
    let (h, w) = (rng.gen_range(6..=16), rng.gen_range(6..=16));
    let annotations = (0..rng.gen_range(min_anns..=4))
        .map(|k| Annotation::from_rle(first_ann + k, id, rng.gen_range(1..=3), Rle::encode(&random_blob(rng, h, w))))
        .collect();
    AnnotatedImage {
        image: image(id, w, h),
        pixels: None,
        annotations,
    }
}

/// One seeded Copy-Paste run checked against an independently derived
/// expectation for every surviving pre-existing annotation.
pub fn copy_paste_invariants(seed: u64) -> Check {
    let mut rng = rng(seed);
    let target = random_annotated(&mut rng, 1, 1, 0);
    let donors: Vec<AnnotatedImage> = (2..=4).map(|id| random_annotated(&mut rng, id, id * 100, 1)).collect();
    let donor_refs: Vec<&AnnotatedImage> = donors.iter().collect();
    let params = AugmentParams {
        seed,
        ..AugmentParams::default()
    };
    let run = |s: u64| copy_paste(&target, &donor_refs, &params, &mut super::rng(s)).map_err(|e| e.to_string());
    let out = run(seed ^ 0xC0FFEE)?;

    // determinism, down to the serialized bytes
    let again = run(seed ^ 0xC0FFEE)?;
    ensure!(out == again, "seed {seed}: re-run differs");
    let bytes = |ai: &AnnotatedImage| serde_json::to_vec(&ai.annotations).unwrap();
    ensure!(bytes(&out) == bytes(&again), "seed {seed}: re-run serializes differently");

    ensure!(out.image == target.image, "seed {seed}: image metadata changed");
    let (h, w) = (target.image.height, target.image.width);
    let max_id = target
        .annotations
        .iter()
        .chain(donors.iter().flat_map(|d| &d.annotations))
        .map(|a| a.id)
        .max()
        .unwrap_or(0);
    let originals: BTreeMap<u64, &Annotation> = target.annotations.iter().map(|a| (a.id, a)).collect();

    let mut pasted_union = BinaryMask::new(h, w);
    let mut pasted = Vec::new();
    let mut kept = Vec::new();
    let mut seen = BTreeSet::new();
    for a in &out.annotations {
        ensure!(seen.insert(a.id), "seed {seed}: duplicate id {}", a.id);
        let m = out.mask(a).map_err(|e| e.to_string())?;
        ensure!(!m.is_empty(), "seed {seed}: annotation {} is empty", a.id);
        ensure!(a.area == m.area() as f64, "seed {seed}: annotation {} area is stale", a.id);
        ensure!(a.bbox == m.bbox(), "seed {seed}: annotation {} bbox is stale", a.id);
        if originals.contains_key(&a.id) {
            kept.push((a.id, m));
        } else {
            ensure!(a.id > max_id, "seed {seed}: new id {} collides with existing ids", a.id);
            ensure!(
                pasted_union.overlap(&m).unwrap().intersection == 0.0,
                "seed {seed}: pasted instances overlap"
            );
            pasted_union.union_with(&m).unwrap();
            pasted.push(m);
        }
    }
    ensure!(
        pasted.len() <= params.paste_max as usize,
        "seed {seed}: {} pastes exceed the maximum",
        pasted.len()
    );

    // every original survives exactly as original minus the pasted pixels,
    // unless nothing is left of it
    let mut expected_kept = 0;
    for (id, orig) in &originals {
        let mut want = out.mask(orig).unwrap();
        want.subtract(&pasted_union).unwrap();
        let got = kept.iter().find(|(k, _)| k == id).map(|(_, m)| m);
        if want.is_empty() {
            ensure!(got.is_none(), "seed {seed}: fully occluded annotation {id} kept");
        } else {
            expected_kept += 1;
            let got = got.ok_or_else(|| format!("seed {seed}: visible annotation {id} dropped"))?;
            ensure!(*got == want, "seed {seed}: annotation {id} not occluded exactly by the pastes");
            ensure!(got.area() as f64 <= orig.area, "seed {seed}: annotation {id} grew");
        }
    }
    ensure!(
        out.annotations.len() == expected_kept + pasted.len(),
        "seed {seed}: {} annotations, expected {} kept + {} pasted",
        out.annotations.len(),
        expected_kept,
        pasted.len()
    );
    Ok(())
}

/// Default-parameter geometric augmentation of a random-sized image always
/// yields a 1920x1080 frame, for pixels and annotations alike.
pub fn geometric_output_size(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (w, h) = if rng.gen_bool(0.3) {
        // extreme aspect ratios
        (rng.gen_range(1..=40), rng.gen_range(200..=3000))
    } else {
        (rng.gen_range(16..=2400), rng.gen_range(16..=2400))
    };
    let (w, h) = if rng.gen_bool(0.5) { (w, h) } else { (h, w) };
    let poly = vec![0.0, 0.0, w as f64, 0.0, w as f64 * 0.5, h as f64];
    let rle = Segmentation::Polygons(vec![poly.clone()]).to_rle(h, w).map_err(|e| e.to_string())?;
    let mut ann = Annotation::from_rle(1, 1, 1, rle);
    ann.segmentation = Segmentation::Polygons(vec![poly]);
    let pixels = (w * h <= 256 * 256).then(|| image::RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 7])));
    let ai = AnnotatedImage {
        image: image(1, w, h),
        pixels,
        annotations: vec![ann],
    };
    let params = AugmentParams::default();
    let out = geometric_augment(&ai, &params, &mut rng).map_err(|e| format!("{w}x{h}: {e}"))?;
    ensure!(
        (out.image.width, out.image.height) == (1920, 1080),
        "{w}x{h} -> {}x{}",
        out.image.width,
        out.image.height
    );
    if let Some(p) = &out.pixels {
        ensure!(p.dimensions() == (1920, 1080), "{w}x{h}: pixel buffer is {:?}", p.dimensions());
    }
    for a in &out.annotations {
        let m = out.mask(a).map_err(|e| e.to_string())?;
        ensure!((m.width(), m.height()) == (1920, 1080), "{w}x{h}: mask has wrong size");
        ensure!(a.area == m.area() as f64 && a.area > 0.0, "{w}x{h}: bad area {}", a.area);
    }
    Ok(())
}

fn random_snapshot(rng: &mut impl Rng) -> WeightSnapshot {
    let mut s = WeightSnapshot::default();
    for (name, shape) in [("conv.weight", vec![2, 3]), ("conv.bias", vec![3]), ("head.weight", vec![4, 1, 2])] {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-10.0..10.0) * 10f64.powi(rng.gen_range(-3..3))).collect();
        s.tensors.insert(name.to_string(), Tensor::new(shape, values).unwrap());
    }
    s.meta.insert("step".into(), serde_json::json!(rng.gen_range(0..1000)));
    s
}

/// Two-pass mean: plain mean refined by the mean of the residuals.
pub fn two_pass_mean(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    m + xs.iter().map(|x| x - m).sum::<f64>() / n
}

/// Averages of random snapshots match the two-pass oracle and ignore order.
pub fn swa_matches_oracle(seed: u64) -> Check {
    let mut rng = rng(seed);
    let snaps: Vec<WeightSnapshot> = (0..5).map(|_| random_snapshot(&mut rng)).collect();
    let avg = average_snapshots(&snaps).map_err(|e| e.to_string())?;
    for (name, t) in &avg.tensors {
        for (i, &v) in t.values.iter().enumerate() {
            let xs: Vec<f64> = snaps.iter().map(|s| s.tensors[name].values[i]).collect();
            let want = two_pass_mean(&xs);
            ensure!((v - want).abs() <= 1e-12, "seed {seed}: {name}[{i}] = {v}, oracle {want}");
        }
    }
    let mut shuffled = snaps.clone();
    for _ in 0..4 {
        shuffled.rotate_left(rng.gen_range(0..5));
        shuffled.swap(rng.gen_range(0..5), rng.gen_range(0..5));
        let other = average_snapshots(&shuffled).map_err(|e| e.to_string())?;
        for (name, t) in &avg.tensors {
            for (a, b) in t.values.iter().zip(&other.tensors[name].values) {
                ensure!((a - b).abs() <= 1e-12, "seed {seed}: {name} depends on snapshot order");
            }
        }
    }
    Ok(())
}

/// Route mode hands every category exactly the routed model's AP.
pub fn route_mode_preserves_ap(gt: &Dataset, a: &[Detection], b: &[Detection], routing: &RoutingTable) -> Check {
    let params = EvalParams::default();
    let eval = |d: &[Detection]| evaluate_map(gt, d, &params).map_err(|e| e.to_string());
    let merged = integrate_by_category(a, b, routing, &gt.categories, &NmsParams::default()).map_err(|e| e.to_string())?;
    let (ra, rb, rm) = (eval(a)?, eval(b)?, eval(&merged)?);
    for (id, cat) in &rm.per_category {
        let src = if routing.overrides.get(id).copied().unwrap_or(routing.default_source) == Source::A {
            &ra
        } else {
            &rb
        };
        ensure!(
            cat.ap == src.per_category[id].ap,
            "category {id}: integrated AP {:?}, routed source AP {:?}",
            cat.ap,
            src.per_category[id].ap
        );
    }
    Ok(())
}

/// Random two-model case with a random routing table.
pub fn random_route_case(seed: u64) -> Check {
    let (gt, a) = random_tiny_case(seed);
    let mut rng = rng(seed.wrapping_add(1 << 32));
    let b = random_detections(&mut rng, &gt, 10);
    let pick = |r: &mut rand_chacha::ChaCha8Rng| if r.gen_bool(0.5) { Source::A } else { Source::B };
    let mut routing = RoutingTable {
        default_source: pick(&mut rng),
        mode: Mode::Route,
        ..RoutingTable::default()
    };
    for c in &gt.categories {
        if rng.gen_bool(0.5) {
            routing.overrides.insert(c.id, pick(&mut rng));
        }
    }
    route_mode_preserves_ap(&gt, &a, &b, &routing).map_err(|e| format!("seed {seed}: {e}"))
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Runs augment -> nms -> tta-merge -> ensemble -> evaluate on the bundled
/// fixtures and returns every produced file by name.
pub fn run_pipeline(bin: &Path, jobs: Option<usize>) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let fx = fixtures_dir();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = |name: &str| dir.path().join(name);
    let f = |name: &str| fx.join(name);
    let steps: Vec<Vec<std::ffi::OsString>> = vec![
        vec!["--config".into(), f("augment.json").into(), "augment".into(), "--dataset".into(), f("train.json").into(), "--out".into(), out("train_aug.json").into()],
        vec!["nms".into(), f("model_a.json").into(), out("a_nms.json").into(), "--dataset".into(), f("val.json").into()],
        vec!["nms".into(), f("model_a_flip.json").into(), out("a_flip_nms.json").into()],
        vec!["tta-merge".into(), "--original".into(), out("a_nms.json").into(), "--flipped".into(), out("a_flip_nms.json").into(), "--widths".into(), f("widths.json").into(), "--out".into(), out("a_tta.json").into()],
        vec!["ensemble".into(), "--a".into(), out("a_tta.json").into(), "--b".into(), f("model_b.json").into(), "--dataset".into(), f("val.json").into(), "--route-file".into(), f("routing.json").into(), "--out".into(), out("ensemble.json").into()],
        vec!["evaluate".into(), "--gt".into(), f("val.json").into(), "--results".into(), out("ensemble.json").into(), "--report".into(), out("report.json").into()],
    ];
    let mut table = Vec::new();
    for args in steps {
        let mut cmd = Command::new(bin);
        if let Some(j) = jobs {
            cmd.arg("--jobs").arg(j.to_string());
        }
        let res = cmd.args(&args).output().map_err(|e| e.to_string())?;
        ensure!(
            res.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        table = res.stdout;
    }
    std::fs::write(out("report.txt"), table).map_err(|e| e.to_string())?;
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir.path()).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

/// Pipeline outputs are identical across repeated runs and thread counts.
pub fn pipeline_deterministic(bin: &Path) -> Check {
    let base = run_pipeline(bin, None)?;
    ensure!(base.len() == 7, "expected 7 pipeline outputs, got {:?}", base.keys().collect::<Vec<_>>());
    for jobs in [None, Some(1), Some(4)] {
        let other = run_pipeline(bin, jobs)?;
        for (name, bytes) in &base {
            ensure!(other.get(name) == Some(bytes), "{name} differs with --jobs {jobs:?}");
        }
    }
    Ok(())
}
