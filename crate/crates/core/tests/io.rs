mod common;

use rand::Rng;
use common::*;
use segkit::coco::{parse_dataset, parse_results_standalone, write_dataset, write_results, Dataset};
use segkit::{Detection, Error, Rle};

fn random_detection(rng: &mut impl Rng) -> Detection {
    let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let m = if rng.gen_bool(0.1) {
        segkit::BinaryMask::new(h, w)
    } else {
        random_blob(rng, h, w)
    };
    // full-precision scores, including awkward ones
    let score = match rng.gen_range(0..4) {
        0 => rng.gen::<f64>(),
        1 => 1.0 / rng.gen_range(1..1000) as f64,
        2 => f64::from_bits(rng.gen_range(0x3f00_0000_0000_0000..0x3ff0_0000_0000_0000)),
        _ => rng.gen_range(0..=1000) as f64 / 1000.0,
    };
    let mut d = Detection::new(rng.gen_range(0..1 << 40), rng.gen_range(1..100), score, Rle::encode(&m));
    if rng.gen_bool(0.2) {
        d.extra.insert("source".into(), serde_json::json!("A"));
    }
    d
}

#[test]
fn results_round_trip_bit_exact() {
    let mut rng = rng(42);
    let dets: Vec<Detection> = (0..1000).map(|_| random_detection(&mut rng)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.json");
    write_results(&dets, &path).unwrap();
    let back = parse_results_standalone(&path).unwrap();
    assert_eq!(back.len(), dets.len());
    for (a, b) in dets.iter().zip(&back) {
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        assert_eq!(a, b);
    }
    // writing again is byte-identical
    let again = dir.path().join("again.json");
    write_results(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn compressed_counts_and_missing_bbox_are_accepted() {
    let m = rect_mask(6, 5, 1, 2, 4, 5);
    let rle = Rle::encode(&m);
    let text = format!(
        r#"[{{"image_id": 3, "category_id": 1, "score": 0.5,
             "segmentation": {{"size": [6, 5], "counts": "{}"}}}}]"#,
        rle.to_compressed()
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    std::fs::write(&path, text).unwrap();
    let dets = parse_results_standalone(&path).unwrap();
    assert_eq!(dets[0].segmentation, rle);
    assert_eq!(dets[0].bbox, m.bbox());
}

#[test]
fn dataset_round_trip_keeps_unknown_keys() {
    let text = r#"{
        "info": {"year": 2021},
        "images": [{"id": 1, "width": 4, "height": 4, "file_name": "a.png", "license": 3}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "iscrowd": 0,
                         "segmentation": [[0, 0, 2, 0, 2, 2, 0, 2]], "area": 4, "bbox": [0, 0, 2, 2],
                         "attributes": {"occluded": true}}],
        "categories": [{"id": 1, "name": "cane", "supercategory": "object"}]
    }"#;
    let ds = Dataset::from_json(text, "inline.json").unwrap();
    assert_eq!(ds.extra["info"]["year"], 2021);
    assert_eq!(ds.images[0].extra["license"], 3);
    assert_eq!(ds.annotations[0].extra["attributes"]["occluded"], true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(parse_dataset(&path).unwrap(), ds);
}

#[test]
fn parse_errors_locate_the_problem() {
    let text = "{\n  \"images\": [\n    {\"id\": 1, \"width\": 4,, \"height\": 4}\n  ]\n}";
    match Dataset::from_json(text, "broken.json") {
        Err(Error::Parse { line, offset, .. }) => {
            assert_eq!(line, 3);
            assert!(text[..offset].ends_with("\"width\": 4,"), "offset {offset} points at {:?}", &text[offset..]);
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn validation_lists_every_problem() {
    let text = r#"{
        "images": [{"id": 1, "width": 4, "height": 4}, {"id": 1, "width": 4, "height": 4}],
        "annotations": [{"id": 7, "image_id": 9, "category_id": 5, "segmentation": [[0, 0, 1, 0, 1, 1]]}],
        "categories": [{"id": 1, "name": "x"}]
    }"#;
    let Err(Error::Validation(problems)) = Dataset::from_json(text, "bad.json") else {
        panic!("expected validation errors");
    };
    assert!(problems.len() >= 3, "{problems:?}");
    assert!(problems.iter().any(|p| p.contains('7')), "{problems:?}");
}
