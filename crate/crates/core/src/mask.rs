//! Binary-mask kernel: dense masks, COCO run-length encoding, polygon
//! rasterization, overlap measures and horizontal flips.
//!
//! Run-length encodings follow the COCO layout: pixels are scanned
//! column-major (down column 0, then column 1, ...) and runs alternate
//! background/foreground starting with a (possibly empty) background run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x, y, w, h]`, `(x, y)` being the top-left corner in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const EMPTY: BBox = BBox {
        x: 0.0,
        y: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Box mirrored about the vertical centre line of an image `image_width` wide.
    pub fn hflip(&self, image_width: f64) -> BBox {
        BBox {
            x: image_width - self.x - self.w,
            ..*self
        }
    }

    pub fn overlap(&self, other: &BBox) -> Overlap {
        let iw = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let ih = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        Overlap {
            intersection: inter,
            union: self.area() + other.area() - inter,
        }
    }

    fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        if !(w >= 0.0 && h >= 0.0) {
            return Err(serde::de::Error::custom(format!(
                "bbox extent must be non-negative, got w={w} h={h}"
            )));
        }
        Ok(BBox { x, y, w, h })
    }
}

/// Intersection and union sizes of two regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub intersection: f64,
    pub union: f64,
}

impl Overlap {
    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self) -> f64 {
        if self.union > 0.0 {
            self.intersection / self.union
        } else {
            0.0
        }
    }

    /// `score * (1 - iou)`, evaluated as `score * (union - intersection) / union`
    /// so integer pixel counts do not lose precision to the subtraction.
    pub fn scale_by_complement(&self, score: f64) -> f64 {
        if self.union > 0.0 {
            score * (self.union - self.intersection) / self.union
        } else {
            score
        }
    }
}

/// Dense binary mask stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(height: u32, width: u32) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_bits(height: u32, width: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height as usize * width as usize {
            return Err(Error::Dimension(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height as usize * width as usize);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    fn idx(&self, row: u32, col: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[self.idx(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let i = self.idx(row, col);
        self.bits[i] = value;
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box of the foreground; [`BBox::EMPTY`] for an empty mask.
    pub fn bbox(&self) -> BBox {
        let (mut r0, mut c0, mut r1, mut c1) = (u32::MAX, u32::MAX, 0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        if r0 == u32::MAX {
            return BBox::EMPTY;
        }
        BBox::new(
            c0 as f64,
            r0 as f64,
            (c1 - c0 + 1) as f64,
            (r1 - r0 + 1) as f64,
        )
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Dimension(format!(
                "{}x{} mask vs {}x{} mask",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn overlap(&self, other: &BinaryMask) -> Result<Overlap> {
        self.check_same_dims(other)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        Ok(Overlap {
            intersection: inter as f64,
            union: union as f64,
        })
    }

    /// Clears every pixel that is set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn hflip(&self) -> BinaryMask {
        let w = self.width;
        BinaryMask::from_fn(self.height, w, |r, c| self.get(r, w - 1 - c))
    }

    /// Nearest-neighbour resize; destination pixel centres are mapped back
    /// into the source grid.
    pub fn resize_nearest(&self, height: u32, width: u32) -> BinaryMask {
        let rows = nearest_index_map(self.height, height);
        let cols = nearest_index_map(self.width, width);
        BinaryMask::from_fn(height, width, |r, c| {
            self.get(rows[r as usize], cols[c as usize])
        })
    }

    /// Places this mask on a `height x width` canvas with its origin at
    /// `(row_offset, col_offset)`; negative offsets crop. Pixels falling
    /// outside the canvas are discarded, uncovered canvas pixels are zero.
    pub fn place(&self, height: u32, width: u32, row_offset: i64, col_offset: i64) -> BinaryMask {
        let mut out = BinaryMask::new(height, width);
        for r in 0..self.height {
            let dr = r as i64 + row_offset;
            if dr < 0 || dr >= height as i64 {
                continue;
            }
            for c in 0..self.width {
                let dc = c as i64 + col_offset;
                if dc < 0 || dc >= width as i64 {
                    continue;
                }
                if self.get(r, c) {
                    out.set(dr as u32, dc as u32, true);
                }
            }
        }
        out
    }
}

/// For each destination index, the source index whose cell contains the
/// destination cell centre.
pub(crate) fn nearest_index_map(src: u32, dst: u32) -> Vec<u32> {
    (0..dst)
        .map(|d| {
            let s = ((d as u64 * 2 + 1) * src as u64) / (dst as u64 * 2);
            (s as u32).min(src.saturating_sub(1))
        })
        .collect()
}

/// COCO run-length encoded mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RleJson", into = "RleJson")]
pub struct Rle {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    size: [u32; 2],
    counts: RleCounts,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Runs(Vec<u32>),
    Compressed(String),
}

impl TryFrom<RleJson> for Rle {
    type Error = Error;

    fn try_from(j: RleJson) -> Result<Self> {
        let [h, w] = j.size;
        match j.counts {
            RleCounts::Runs(counts) => Rle::new(h, w, counts),
            RleCounts::Compressed(s) => Rle::from_compressed(h, w, &s),
        }
    }
}

impl From<Rle> for RleJson {
    fn from(r: Rle) -> Self {
        RleJson {
            size: [r.height, r.width],
            counts: RleCounts::Runs(r.counts),
        }
    }
}

impl Rle {
    /// Builds a run-length encoding, checking that the runs cover exactly `height * width` pixels.
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(Error::invalid(format!(
                "RLE counts sum to {total}, expected {height}x{width} = {expected}"
            )));
        }
        Ok(Rle {
            height,
            width,
            counts,
        })
    }

    pub fn encode(mask: &BinaryMask) -> Rle {
        let (h, w) = (mask.height, mask.width);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for c in 0..w {
            for r in 0..h {
                let v = mask.get(r, c);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            height: h,
            width: w,
            counts,
        }
    }

    pub fn decode(&self) -> BinaryMask {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut mask = BinaryMask::new(self.height, self.width);
        let mut pos = 0usize;
        for (i, &n) in self.counts.iter().enumerate() {
            let n = n as usize;
            if i % 2 == 1 {
                for p in pos..pos + n {
                    let (c, r) = (p / h, p % h);
                    mask.bits[r * w + c] = true;
                }
            }
            pos += n;
        }
        mask
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn empty(height: u32, width: u32) -> Rle {
        Rle {
            height,
            width,
            counts: vec![height * width],
        }
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Tight bounding box computed directly from the runs.
    pub fn bbox(&self) -> BBox {
        let h = self.height as u64;
        let (mut x0, mut y0, mut x1, mut y1) = (u64::MAX, u64::MAX, 0u64, 0u64);
        let mut pos = 0u64;
        for (i, &n) in self.counts.iter().enumerate() {
            let n = n as u64;
            if i % 2 == 1 && n > 0 {
                let (start, end) = (pos, pos + n - 1);
                let (c_start, r_start) = (start / h, start % h);
                let (c_end, r_end) = (end / h, end % h);
                x0 = x0.min(c_start);
                x1 = x1.max(c_end);
                if c_end > c_start {
                    y0 = 0;
                    y1 = h - 1;
                } else {
                    y0 = y0.min(r_start);
                    y1 = y1.max(r_end);
                }
            }
            pos += n;
        }
        if x0 == u64::MAX {
            return BBox::EMPTY;
        }
        BBox::new(
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        )
    }

    /// Intersection/union pixel counts by merging the two run lists.
    pub fn overlap(&self, other: &Rle) -> Result<Overlap> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Dimension(format!(
                "{}x{} RLE vs {}x{} RLE",
                self.height, self.width, other.height, other.width
            )));
        }
        let inter = intersection_count(&self.counts, &other.counts);
        let union = self.area() + other.area() - inter;
        Ok(Overlap {
            intersection: inter as f64,
            union: union as f64,
        })
    }

    pub fn hflip(&self) -> Rle {
        Rle::encode(&self.decode().hflip())
    }

    /// COCO's compact string form (6-bit chunks, offset by 48, counts after
    /// the second delta-coded against the count two places earlier).
    pub fn to_compressed(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = c as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut chunk = (x & 0x1f) as u8;
                x >>= 5;
                let more = if chunk & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    chunk |= 0x20;
                }
                out.push((chunk + 48) as char);
                if !more {
                    break;
                }
            }
        }
        out
    }

    pub fn from_compressed(height: u32, width: u32, s: &str) -> Result<Rle> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u32> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let b = bytes[p];
                if !(48..48 + 64).contains(&b) {
                    return Err(Error::invalid(format!(
                        "invalid character {:?} in compressed RLE at {p}",
                        b as char
                    )));
                }
                if k >= 12 {
                    return Err(Error::invalid("compressed RLE run too long"));
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                p += 1;
                k += 1;
                if c & 0x20 == 0 {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
                if p >= bytes.len() {
                    return Err(Error::invalid("truncated compressed RLE"));
                }
            }
            let m = counts.len();
            if m > 2 {
                x += counts[m - 2] as i64;
            }
            let run = u32::try_from(x)
                .map_err(|_| Error::invalid(format!("compressed RLE decodes to run {x}")))?;
            counts.push(run);
        }
        Rle::new(height, width, counts)
    }
}

fn intersection_count(a: &[u32], b: &[u32]) -> u64 {
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (0u64, 0u64);
    let mut total = 0u64;
    loop {
        while ra == 0 {
            if i >= a.len() {
                return total;
            }
            ra = a[i] as u64;
            i += 1;
        }
        while rb == 0 {
            if j >= b.len() {
                return total;
            }
            rb = b[j] as u64;
            j += 1;
        }
        let step = ra.min(rb);
        // the run just loaded from index i-1 is foreground when i-1 is odd
        if (i - 1) % 2 == 1 && (j - 1) % 2 == 1 {
            total += step;
        }
        ra -= step;
        rb -= step;
    }
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    Rle::encode(mask)
}

pub fn rle_decode(rle: &Rle) -> BinaryMask {
    rle.decode()
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(a.overlap(b)?.iou())
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    a.overlap(b).iou()
}

pub fn hflip_geometry(mask: &BinaryMask, bbox: &BBox, image_width: u32) -> Result<(BinaryMask, BBox)> {
    if mask.width != image_width {
        return Err(Error::Dimension(format!(
            "mask width {} vs image width {image_width}",
            mask.width
        )));
    }
    Ok((mask.hflip(), bbox.hflip(image_width as f64)))
}

/// Fills the union of `polygons` (flat `x0,y0,x1,y1,...` lists). A pixel is
/// foreground iff its centre `(col + 0.5, row + 0.5)` lies inside a polygon
/// under the even-odd rule.
pub fn rasterize_polygons(polygons: &[Vec<f64>], height: u32, width: u32) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(height, width);
    let mut crossings = Vec::new();
    for (pi, poly) in polygons.iter().enumerate() {
        if poly.len() % 2 != 0 || poly.len() < 6 {
            return Err(Error::invalid(format!(
                "polygon {pi} has {} coordinates; need an even count of at least 6",
                poly.len()
            )));
        }
        if poly.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("polygon {pi} has a non-finite coordinate")));
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let (ymin, ymax) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.1), hi.max(p.1))
            });
        let row_lo = (ymin - 0.5).ceil().max(0.0);
        let row_hi = (ymax - 0.5).floor().min(height as f64 - 1.0);
        if row_lo > row_hi {
            continue;
        }
        for row in row_lo as u32..=row_hi as u32 {
            let y = row as f64 + 0.5;
            crossings.clear();
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > y) != (yj > y) {
                    crossings.push((xj - xi) * (y - yi) / (yj - yi) + xi);
                }
                j = i;
            }
            crossings.sort_by(f64::total_cmp);
            // centre x is inside iff an odd number of crossings lie at or left of it
            for span in crossings.chunks_exact(2) {
                let c_lo = (span[0] - 0.5).ceil().max(0.0);
                let c_hi_excl = (span[1] - 0.5).ceil().min(width as f64);
                if c_lo < c_hi_excl {
                    for col in c_lo as u32..c_hi_excl as u32 {
                        mask.set(row, col, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}
