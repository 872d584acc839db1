//! COCO-style dataset and result files.
//!
//! Keys this crate does not model (`info`, `licenses`, `supercategory`, ...)
//! are kept in the `extra` maps and written back out unchanged.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::mask::{rasterize_polygons, BBox, BinaryMask, Rle};

pub type Extra = Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

impl Segmentation {
    pub fn to_mask(&self, height: u32, width: u32) -> Result<BinaryMask> {
        match self {
            Segmentation::Polygons(polys) => rasterize_polygons(polys, height, width),
            Segmentation::Rle(rle) => {
                check_rle_size(rle, height, width)?;
                Ok(rle.decode())
            }
        }
    }

    pub fn to_rle(&self, height: u32, width: u32) -> Result<Rle> {
        match self {
            Segmentation::Rle(rle) => {
                check_rle_size(rle, height, width)?;
                Ok(rle.clone())
            }
            polys => Ok(Rle::encode(&polys.to_mask(height, width)?)),
        }
    }
}

fn check_rle_size(rle: &Rle, height: u32, width: u32) -> Result<()> {
    if (rle.height(), rle.width()) != (height, width) {
        return Err(Error::Dimension(format!(
            "RLE size {}x{} vs image {height}x{width}",
            rle.height(),
            rle.width()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub bbox: BBox,
    #[serde(default, with = "int_flag")]
    pub iscrowd: bool,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Annotation {
    /// Builds an annotation whose `area` and `bbox` are derived from `rle`.
    pub fn from_rle(id: u64, image_id: u64, category_id: u64, rle: Rle) -> Self {
        let mut a = Annotation {
            id,
            image_id,
            category_id,
            segmentation: Segmentation::Rle(rle),
            area: 0.0,
            bbox: BBox::EMPTY,
            iscrowd: false,
            extra: Extra::new(),
        };
        a.refresh_geometry();
        a
    }

    /// Recomputes `area` and `bbox` from an RLE segmentation. Polygon
    /// segmentations are left alone.
    pub fn refresh_geometry(&mut self) {
        if let Segmentation::Rle(rle) = &self.segmentation {
            self.area = rle.area() as f64;
            self.bbox = rle.bbox();
        }
    }
}

/// COCO encodes flags as 0/1 integers; booleans are accepted on read.
mod int_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Flag {
            Int(i64),
            Bool(bool),
        }
        Ok(match Flag::deserialize(d)? {
            Flag::Int(i) => i != 0,
            Flag::Bool(b) => b,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Dataset {
    pub fn from_json(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let ds: Dataset =
            serde_json::from_str(text).map_err(|e| Error::json(origin.as_ref(), text, e))?;
        ds.validate()?;
        Ok(ds)
    }

    /// Checks id uniqueness, image sizes and cross-references, reporting every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();

        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                problems.push(format!("duplicate image id {}", img.id));
            }
            if img.width == 0 || img.height == 0 {
                problems.push(format!(
                    "image {} has non-positive size {}x{}",
                    img.id, img.width, img.height
                ));
            }
        }

        let mut cat_ids = HashSet::new();
        let mut cat_names = HashSet::new();
        for cat in &self.categories {
            if !cat_ids.insert(cat.id) {
                problems.push(format!("duplicate category id {}", cat.id));
            }
            if !cat_names.insert(cat.name.as_str()) {
                problems.push(format!("duplicate category name {:?}", cat.name));
            }
        }

        let images = self.image_index();
        let mut ann_ids = HashSet::new();
        for ann in &self.annotations {
            if !ann_ids.insert(ann.id) {
                problems.push(format!("duplicate annotation id {}", ann.id));
            }
            if !cat_ids.contains(&ann.category_id) {
                problems.push(format!(
                    "annotation {} references unknown category_id {}",
                    ann.id, ann.category_id
                ));
            }
            if ann.area.is_nan() || ann.area < 0.0 {
                problems.push(format!("annotation {} has invalid area {}", ann.id, ann.area));
            }
            match images.get(&ann.image_id) {
                None => problems.push(format!(
                    "annotation {} references unknown image_id {}",
                    ann.id, ann.image_id
                )),
                Some(img) => match &ann.segmentation {
                    Segmentation::Rle(rle) => {
                        if let Err(e) = check_rle_size(rle, img.height, img.width) {
                            problems.push(format!("annotation {}: {e}", ann.id));
                        }
                    }
                    Segmentation::Polygons(polys) => {
                        for (i, p) in polys.iter().enumerate() {
                            if p.len() < 6 || p.len() % 2 != 0 {
                                problems.push(format!(
                                    "annotation {}: polygon {i} has {} coordinates",
                                    ann.id,
                                    p.len()
                                ));
                            }
                        }
                    }
                },
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn image_index(&self) -> HashMap<u64, &ImageInfo> {
        self.images.iter().map(|i| (i.id, i)).collect()
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Decoded mask of an annotation, sized to its image.
    pub fn annotation_mask(&self, ann: &Annotation) -> Result<BinaryMask> {
        let img = self
            .images
            .iter()
            .find(|i| i.id == ann.image_id)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "annotation {} references unknown image_id {}",
                    ann.id, ann.image_id
                ))
            })?;
        ann.segmentation.to_mask(img.height, img.width)
    }
}

/// One predicted instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub segmentation: Rle,
    pub bbox: BBox,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Detection {
    /// Detection whose box is the tight box of `segmentation`.
    pub fn new(image_id: u64, category_id: u64, score: f64, segmentation: Rle) -> Self {
        let bbox = segmentation.bbox();
        Detection {
            image_id,
            category_id,
            score,
            segmentation,
            bbox,
            extra: Extra::new(),
        }
    }
}

#[derive(Deserialize)]
struct DetectionRecord {
    image_id: u64,
    category_id: u64,
    score: f64,
    segmentation: Rle,
    #[serde(default)]
    bbox: Option<BBox>,
    #[serde(flatten)]
    extra: Extra,
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        let bbox = r.bbox.unwrap_or_else(|| r.segmentation.bbox());
        Detection {
            image_id: r.image_id,
            category_id: r.category_id,
            score: r.score,
            segmentation: r.segmentation,
            bbox,
            extra: r.extra,
        }
    }
}

pub fn results_from_json(text: &str, origin: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<Detection>> {
    let records: Vec<DetectionRecord> =
        serde_json::from_str(text).map_err(|e| Error::json(origin.as_ref(), text, e))?;
    let dets: Vec<Detection> = records.into_iter().map(Detection::from).collect();
    validate_results(&dets, dataset)?;
    Ok(dets)
}

/// Checks scores, references and mask sizes of every detection, reporting all problems.
pub fn validate_results(dets: &[Detection], dataset: &Dataset) -> Result<()> {
    let images = dataset.image_index();
    let cats: HashSet<u64> = dataset.categories.iter().map(|c| c.id).collect();
    let mut problems = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.score) {
            problems.push(format!("result {i}: score {} outside [0, 1]", d.score));
        }
        if !cats.contains(&d.category_id) {
            problems.push(format!("result {i}: unknown category_id {}", d.category_id));
        }
        match images.get(&d.image_id) {
            None => problems.push(format!("result {i}: unknown image_id {}", d.image_id)),
            Some(img) => {
                if let Err(e) = check_rle_size(&d.segmentation, img.height, img.width) {
                    problems.push(format!("result {i} (image {}): {e}", d.image_id));
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

/// Parses a results file without a dataset: checks only scores and RLE consistency.
pub fn results_from_json_standalone(text: &str, origin: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let records: Vec<DetectionRecord> =
        serde_json::from_str(text).map_err(|e| Error::json(origin.as_ref(), text, e))?;
    let dets: Vec<Detection> = records.into_iter().map(Detection::from).collect();
    let problems: Vec<String> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| !(0.0..=1.0).contains(&d.score))
        .map(|(i, d)| format!("result {i}: score {} outside [0, 1]", d.score))
        .collect();
    if problems.is_empty() {
        Ok(dets)
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn parse_results_standalone(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    results_from_json_standalone(&read_text(path)?, path)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    Dataset::from_json(&read_text(path)?, path)
}

pub fn parse_results(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    results_from_json(&read_text(path)?, path, dataset)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_results(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    write_json(dets, path.as_ref())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_json(dataset, path.as_ref())
}
