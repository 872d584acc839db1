//! Stochastic weight averaging utilities.
//!
//! A [`WeightSnapshot`] is a named map of f64 tensors. On disk it is either a
//! directory holding `manifest.json` plus `weights.bin` (little-endian f64 in
//! manifest order) or a single JSON file with inline values.
//!
//! Batch-norm statistics must be recomputed after averaging; that needs the
//! model and data and is outside the scope of a weights-file tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coco::write_json;
use crate::error::{Error, Result};
use crate::par_map;

/// Initial learning rate of the SGD pre-training stage.
pub const SGD_STAGE_LR: f64 = 0.02;
/// Initial learning rate of the AdamW weight-averaging fine-tune.
pub const SWA_STAGE_LR: f64 = 1e-4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub tensors: IndexMap<String, Tensor>,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl WeightSnapshot {
    pub fn validate(&self) -> Result<()> {
        let problems: Vec<String> = self
            .tensors
            .iter()
            .filter(|(_, t)| t.values.len() != t.shape.iter().product::<usize>())
            .map(|(name, t)| {
                format!(
                    "tensor {name:?}: shape {:?} but {} values",
                    t.shape,
                    t.values.len()
                )
            })
            .collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    byte_order: String,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    offset: u64,
    nbytes: u64,
}

/// Loads a snapshot directory or single-file JSON snapshot.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<WeightSnapshot> {
    let path = path.as_ref();
    let snap = if path.is_dir() {
        load_dir(path)?
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, &text, e))?
    };
    snap.validate()?;
    Ok(snap)
}

fn load_dir(dir: &Path) -> Result<WeightSnapshot> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, &text, e))?;
    if manifest.dtype != "float64" || manifest.byte_order != "little" {
        return Err(Error::invalid(format!(
            "{}: unsupported dtype {:?} / byte order {:?}; expected float64 / little",
            manifest_path.display(),
            manifest.dtype,
            manifest.byte_order
        )));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;

    let mut tensors = IndexMap::new();
    for entry in manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let (start, len) = (entry.offset as usize, entry.nbytes as usize);
        if len != count * 8 || start.checked_add(len).is_none_or(|end| end > bytes.len()) {
            return Err(Error::invalid(format!(
                "tensor {:?}: {} bytes at offset {} does not fit shape {:?} in a {}-byte weights file",
                entry.name,
                len,
                start,
                entry.shape,
                bytes.len()
            )));
        }
        let values = bytes[start..start + len]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if tensors
            .insert(entry.name.clone(), Tensor { shape: entry.shape, values })
            .is_some()
        {
            return Err(Error::invalid(format!("tensor {:?} listed twice", entry.name)));
        }
    }
    Ok(WeightSnapshot {
        tensors,
        meta: manifest.meta,
    })
}

/// Writes the directory form (`manifest.json` + `weights.bin`).
pub fn save_snapshot_dir(snap: &WeightSnapshot, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(snap.tensors.len());
    for (name, t) in &snap.tensors {
        let offset = bytes.len() as u64;
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            nbytes: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        dtype: "float64".into(),
        byte_order: "little".into(),
        tensors: entries,
        meta: snap.meta.clone(),
    };
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))?;
    write_json(&manifest, &dir.join(MANIFEST_FILE))
}

pub fn save_snapshot_json(snap: &WeightSnapshot, path: impl AsRef<Path>) -> Result<()> {
    write_json(snap, path.as_ref())
}

/// Element-wise mean of snapshots with identical tensor names and shapes.
///
/// Each element is the correctly rounded mean of its inputs, so the result
/// is exactly invariant to snapshot order and averaging `k` copies of one
/// snapshot returns it unchanged. Tensors keep the first snapshot's order.
pub fn average_snapshots(snaps: &[WeightSnapshot]) -> Result<WeightSnapshot> {
    let first = snaps
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty list of snapshots"))?;
    let mut problems = Vec::new();
    for (i, s) in snaps.iter().enumerate() {
        for (name, t) in &s.tensors {
            match first.tensors.get(name) {
                None => problems.push(format!("snapshot {i} has tensor {name:?} missing from snapshot 0")),
                Some(r) if r.shape != t.shape => problems.push(format!(
                    "tensor {name:?}: shape {:?} in snapshot {i} vs {:?} in snapshot 0",
                    t.shape, r.shape
                )),
                Some(r) if r.values.len() != t.values.len() => problems.push(format!(
                    "tensor {name:?}: {} values in snapshot {i} vs {} in snapshot 0",
                    t.values.len(),
                    r.values.len()
                )),
                Some(_) => {}
            }
        }
        for name in first.tensors.keys() {
            if !s.tensors.contains_key(name) {
                problems.push(format!("tensor {name:?} missing from snapshot {i}"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let names: Vec<&String> = first.tensors.keys().collect();
    let averaged = par_map(&names, |name| {
        let columns: Vec<&[f64]> = snaps.iter().map(|s| s.tensors[*name].values.as_slice()).collect();
        let mut buf = Vec::with_capacity(snaps.len());
        let values = (0..columns[0].len())
            .map(|j| {
                buf.clear();
                buf.extend(columns.iter().map(|c| c[j]));
                exact_mean(&buf)
            })
            .collect();
        Tensor {
            shape: first.tensors[*name].shape.clone(),
            values,
        }
    });

    let mut meta = BTreeMap::new();
    meta.insert("averaged_count".to_string(), Value::from(snaps.len()));
    Ok(WeightSnapshot {
        tensors: names.into_iter().cloned().zip(averaged).collect(),
        meta,
    })
}

/// Non-overlapping expansion whose exact sum equals the sum of `values`.
fn exact_partials(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials
}

/// Correctly rounded value of an expansion built by [`exact_partials`].
fn round_partials(partials: &[f64]) -> f64 {
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // round-half-even correction when the remaining tail breaks a tie
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Correctly rounded sum, independent of input order.
pub fn exact_sum(values: &[f64]) -> f64 {
    if values.iter().any(|v| !v.is_finite()) {
        return values.iter().sum();
    }
    round_partials(&exact_partials(values.iter().copied()))
}

/// Mean of `values`, independent of input order; exact when all inputs are equal.
pub fn exact_mean(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    if values.iter().any(|v| !v.is_finite()) {
        return values.iter().sum::<f64>() / k;
    }
    let partials = exact_partials(values.iter().copied());
    let q = round_partials(&partials) / k;
    // residual = sum - k*q, with k*q split exactly into p + e
    let p = k * q;
    let e = k.mul_add(q, -p);
    let residual = round_partials(&exact_partials(partials.iter().copied().chain([-p, -e])));
    q + residual / k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub values: Vec<f64>,
}

/// Cyclic linear-decay schedule: each cycle falls from `lr_start` to
/// `lr_end` over `steps_per_cycle` steps, then restarts. One snapshot is
/// meant to be taken at the end of every cycle.
pub fn cyclic_lr_schedule(
    lr_start: f64,
    lr_end: f64,
    steps_per_cycle: usize,
    cycles: usize,
) -> Result<LrSchedule> {
    let mut problems = Vec::new();
    if steps_per_cycle < 2 {
        problems.push(format!("steps per cycle must be at least 2, got {steps_per_cycle}"));
    }
    if cycles == 0 {
        problems.push("cycles must be positive".to_string());
    }
    if !(lr_start > 0.0 && lr_start.is_finite()) {
        problems.push(format!("start learning rate must be positive, got {lr_start}"));
    }
    if lr_end.is_nan() || lr_end < 0.0 {
        problems.push(format!("end learning rate must be non-negative, got {lr_end}"));
    }
    if lr_start < lr_end {
        problems.push(format!("start learning rate {lr_start} is below end {lr_end}"));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let span = lr_start - lr_end;
    let last = (steps_per_cycle - 1) as f64;
    let cycle: Vec<f64> = (0..steps_per_cycle)
        .map(|i| {
            if i + 1 == steps_per_cycle {
                lr_end
            } else {
                (lr_start - span * (i as f64 / last)).clamp(lr_end, lr_start)
            }
        })
        .collect();
    Ok(LrSchedule {
        values: cycle.repeat(cycles),
    })
}
