//! Pixel-space primitives: boxes, binary masks and crop regions.
//!
//! Boxes use integer pixel coordinates with the origin at the top-left and
//! half-open max edges, so `[y_min, y_max) x [x_min, x_max)`. Adjacent boxes
//! never share a pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, serialized as `[y_min, x_min, y_max, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    y_min: u32,
    x_min: u32,
    y_max: u32,
    x_max: u32,
}

impl BoundingBox {
    pub fn new(y_min: u32, x_min: u32, y_max: u32, x_max: u32) -> Result<Self> {
        if y_min >= y_max || x_min >= x_max {
            return Err(Error::Validation(format!(
                "degenerate box [{y_min}, {x_min}, {y_max}, {x_max}]"
            )));
        }
        Ok(Self {
            y_min,
            x_min,
            y_max,
            x_max,
        })
    }

    /// Builds a box from possibly fractional or out-of-range model output,
    /// rounding to the nearest pixel and clipping to `width x height`.
    /// Returns `None` when nothing with positive area is left.
    pub fn from_f64_clipped(coords: [f64; 4], width: u32, height: u32) -> Option<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let clamp = |v: f64, hi: u32| v.round().clamp(0.0, hi as f64) as u32;
        let (y0, y1) = (clamp(coords[0], height), clamp(coords[2], height));
        let (x0, x1) = (clamp(coords[1], width), clamp(coords[3], width));
        Self::new(y0.min(y1), x0.min(x1), y0.max(y1), x0.max(x1)).ok()
    }

    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn area(&self) -> u64 {
        self.height() as u64 * self.width() as u64
    }

    /// Center as `(y, x)`, rounded down.
    pub fn center(&self) -> (u32, u32) {
        (
            self.y_min + self.height() / 2,
            self.x_min + self.width() / 2,
        )
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.y_min, self.x_min, self.y_max, self.x_max]
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.y_max <= height && self.x_max <= width
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.y_min <= other.y_min
            && self.x_min <= other.x_min
            && self.y_max >= other.y_max
            && self.x_max >= other.x_max
    }

    pub fn contains_point(&self, y: u32, x: u32) -> bool {
        (self.y_min..self.y_max).contains(&y) && (self.x_min..self.x_max).contains(&x)
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        BoundingBox::new(
            self.y_min.max(other.y_min),
            self.x_min.max(other.x_min),
            self.y_max.min(other.y_max),
            self.x_max.min(other.x_max),
        )
        .ok()
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn clip(&self, width: u32, height: u32) -> Option<BoundingBox> {
        BoundingBox::new(
            self.y_min,
            self.x_min,
            self.y_max.min(height),
            self.x_max.min(width),
        )
        .ok()
    }

    /// Grows the box by `px` on every side, clamped to the image.
    pub fn dilate(&self, px: u32, width: u32, height: u32) -> BoundingBox {
        BoundingBox {
            y_min: self.y_min.saturating_sub(px),
            x_min: self.x_min.saturating_sub(px),
            y_max: self.y_max.saturating_add(px).min(height),
            x_max: self.x_max.saturating_add(px).min(width),
        }
    }

    /// Shrinks the box by `px` on every side; `None` if it collapses.
    pub fn erode(&self, px: u32) -> Option<BoundingBox> {
        BoundingBox::new(
            self.y_min + px,
            self.x_min + px,
            self.y_max.checked_sub(px)?,
            self.x_max.checked_sub(px)?,
        )
        .ok()
    }

    /// Expands each side by `frac` of the box extent along that axis
    /// (rounded down), clamped to the image.
    pub fn expand_frac(&self, frac: f64, width: u32, height: u32) -> BoundingBox {
        let dy = (self.height() as f64 * frac).floor().max(0.0) as u32;
        let dx = (self.width() as f64 * frac).floor().max(0.0) as u32;
        BoundingBox {
            y_min: self.y_min.saturating_sub(dy),
            x_min: self.x_min.saturating_sub(dx),
            y_max: (self.y_max + dy).min(height),
            x_max: (self.x_max + dx).min(width),
        }
    }

    /// Moves the box by a signed offset, clamping to the image. Returns
    /// `None` if the shifted box has no area left inside the image.
    pub fn translate_clipped(&self, dy: i64, dx: i64, width: u32, height: u32) -> Option<Self> {
        let y0 = self.y_min as f64 + dy as f64;
        let x0 = self.x_min as f64 + dx as f64;
        let y1 = self.y_max as f64 + dy as f64;
        let x1 = self.x_max as f64 + dx as f64;
        Self::from_f64_clipped([y0, x0, y1, x1], width, height)
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Fixed-size binary mask stored as row-aligned 64-bit words.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRecord", into = "MaskRecord")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words_per_row: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        let words_per_row = (width as usize).div_ceil(64);
        Self {
            width,
            height,
            words_per_row,
            words: vec![0; words_per_row * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut mask = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
        mask
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, y: u32, x: u32) -> bool {
        debug_assert!(y < self.height && x < self.width);
        let word = self.words[y as usize * self.words_per_row + x as usize / 64];
        word >> (x % 64) & 1 == 1
    }

    pub fn set(&mut self, y: u32, x: u32, value: bool) {
        assert!(y < self.height && x < self.width, "pixel out of bounds");
        let idx = y as usize * self.words_per_row + x as usize / 64;
        let bit = 1u64 << (x % 64);
        if value {
            self.words[idx] |= bit;
        } else {
            self.words[idx] &= !bit;
        }
    }

    /// Sets `[x0, x1)` on row `y`.
    fn fill_row_span(&mut self, y: u32, x0: u32, x1: u32) {
        let row = y as usize * self.words_per_row;
        let mut x = x0;
        while x < x1 {
            let bit = x % 64;
            let take = (64 - bit).min(x1 - x);
            let chunk = if take == 64 {
                u64::MAX
            } else {
                ((1u64 << take) - 1) << bit
            };
            self.words[row + x as usize / 64] |= chunk;
            x += take;
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, op: impl Fn(u64, u64) -> u64) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| op(a, b))
            .collect();
        Ok(BinaryMask {
            words,
            ..self.clone_empty()
        })
    }

    fn clone_empty(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            words_per_row: self.words_per_row,
            words: Vec::new(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & !b)
    }

    pub fn union_in_place(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn is_subset(&self, other: &BinaryMask) -> Result<bool> {
        self.check_same_shape(other)?;
        Ok(self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0))
    }

    /// Copies a mask expressed in a crop's local frame into this (parent)
    /// mask, OR-ing it in at the crop's offset.
    pub fn paste(&mut self, local: &BinaryMask, region: &CropRegion) -> Result<()> {
        if region.parent_width != self.width || region.parent_height != self.height {
            return Err(Error::Shape("crop region parent does not match mask".into()));
        }
        let b = region.bounds();
        if local.width != b.width() || local.height != b.height() {
            return Err(Error::Shape("local mask does not match crop size".into()));
        }
        for y in 0..local.height {
            for x in 0..local.width {
                if local.get(y, x) {
                    self.set(y + b.y_min(), x + b.x_min(), true);
                }
            }
        }
        Ok(())
    }

    /// Run lengths over the row-major pixel order, starting with a run of
    /// zeros (possibly of length 0).
    pub fn to_rle(&self) -> Vec<u64> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x);
                if v != current {
                    runs.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        runs.push(run);
        runs
    }

    pub fn from_rle(width: u32, height: u32, rle: &[u64]) -> Result<BinaryMask> {
        let total = width as u64 * height as u64;
        let sum: u64 = rle.iter().try_fold(0u64, |acc, &r| acc.checked_add(r)).ok_or_else(
            || Error::Format("run lengths overflow".into()),
        )?;
        if sum != total {
            return Err(Error::Format(format!(
                "run lengths sum to {sum}, expected {total}"
            )));
        }
        let mut mask = BinaryMask::new(width, height);
        let mut pos = 0u64;
        let mut value = false;
        for &run in rle {
            if value {
                for p in pos..pos + run {
                    mask.set((p / width as u64) as u32, (p % width as u64) as u32, true);
                }
            }
            pos += run;
            value = !value;
        }
        Ok(mask)
    }
}

/// JSON form of a mask: `{width, height, rle}` with row-major runs that
/// start with a zero run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u64>,
}

impl From<BinaryMask> for MaskRecord {
    fn from(m: BinaryMask) -> Self {
        MaskRecord {
            width: m.width,
            height: m.height,
            rle: m.to_rle(),
        }
    }
}

impl TryFrom<MaskRecord> for BinaryMask {
    type Error = Error;

    fn try_from(r: MaskRecord) -> Result<Self> {
        BinaryMask::from_rle(r.width, r.height, &r.rle)
    }
}

/// Rasterizes a box into a `width x height` mask.
pub fn rasterize(b: &BoundingBox, width: u32, height: u32) -> Result<BinaryMask> {
    if !b.within(width, height) {
        return Err(Error::Bounds {
            box_2d: b.to_array().map(i64::from),
            width,
            height,
        });
    }
    let mut mask = BinaryMask::new(width, height);
    for y in b.y_min()..b.y_max() {
        mask.fill_row_span(y, b.x_min(), b.x_max());
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub intersection: u64,
    pub union: u64,
    pub a: u64,
    pub b: u64,
}

impl OverlapStats {
    /// IoU with the convention `0/0 = 1`.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn overlap_stats(a: &BinaryMask, b: &BinaryMask) -> Result<OverlapStats> {
    a.check_same_shape(b)?;
    let mut intersection = 0u64;
    let mut a_px = 0u64;
    let mut b_px = 0u64;
    for (&wa, &wb) in a.words.iter().zip(&b.words) {
        intersection += (wa & wb).count_ones() as u64;
        a_px += wa.count_ones() as u64;
        b_px += wb.count_ones() as u64;
    }
    Ok(OverlapStats {
        intersection,
        union: a_px + b_px - intersection,
        a: a_px,
        b: b_px,
    })
}

/// A rectangular crop of a parent image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    parent_width: u32,
    parent_height: u32,
    bounds: BoundingBox,
}

impl CropRegion {
    pub fn new(parent_width: u32, parent_height: u32, bounds: BoundingBox) -> Result<Self> {
        if !bounds.within(parent_width, parent_height) {
            return Err(Error::Bounds {
                box_2d: bounds.to_array().map(i64::from),
                width: parent_width,
                height: parent_height,
            });
        }
        Ok(Self {
            parent_width,
            parent_height,
            bounds,
        })
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, BoundingBox::new(0, 0, height, width)?)
    }

    pub fn bounds(&self) -> BoundingBox {
        self.bounds
    }
    pub fn parent_width(&self) -> u32 {
        self.parent_width
    }
    pub fn parent_height(&self) -> u32 {
        self.parent_height
    }
    pub fn width(&self) -> u32 {
        self.bounds.width()
    }
    pub fn height(&self) -> u32 {
        self.bounds.height()
    }

    pub fn is_full(&self) -> bool {
        self.bounds.to_array() == [0, 0, self.parent_height, self.parent_width]
    }

    /// Clips `b` (parent coordinates) to the region and expresses it in the
    /// region's local frame.
    pub fn to_local(&self, b: &BoundingBox) -> Result<BoundingBox> {
        let clipped = self
            .bounds
            .intersection(b)
            .ok_or(Error::EmptyIntersection)?;
        BoundingBox::new(
            clipped.y_min() - self.bounds.y_min(),
            clipped.x_min() - self.bounds.x_min(),
            clipped.y_max() - self.bounds.y_min(),
            clipped.x_max() - self.bounds.x_min(),
        )
    }

    /// Maps a local box back into parent coordinates.
    pub fn to_parent(&self, b: &BoundingBox) -> Result<BoundingBox> {
        if !b.within(self.width(), self.height()) {
            return Err(Error::Bounds {
                box_2d: b.to_array().map(i64::from),
                width: self.width(),
                height: self.height(),
            });
        }
        BoundingBox::new(
            b.y_min() + self.bounds.y_min(),
            b.x_min() + self.bounds.x_min(),
            b.y_max() + self.bounds.y_min(),
            b.x_max() + self.bounds.x_min(),
        )
    }
}

/// Opaque handle to an image (or a crop of one) that backends resolve.
///
/// `width`/`height` describe the local frame: the crop size when `region`
/// is set, the full image otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub source: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<CropRegion>,
}

impl ImageRef {
    pub fn new(source: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            source: source.into(),
            width,
            height,
            region: None,
        }
    }

    /// A crop of the full image this handle refers to.
    pub fn crop(&self, region: CropRegion) -> ImageRef {
        ImageRef {
            source: self.source.clone(),
            width: region.width(),
            height: region.height(),
            region: if region.is_full() { None } else { Some(region) },
        }
    }

    /// Parent-frame region covered by this handle.
    pub fn region_or_full(&self) -> CropRegion {
        self.region.unwrap_or_else(|| {
            CropRegion::full(self.width, self.height).expect("image handle has positive size")
        })
    }
}

impl std::fmt::Display for ImageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.region {
            None => write!(f, "{}", self.source),
            Some(r) => {
                let b = r.bounds();
                write!(
                    f,
                    "{}@{},{},{},{}",
                    self.source,
                    b.y_min(),
                    b.x_min(),
                    b.y_max(),
                    b.x_max()
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(y0: u32, x0: u32, y1: u32, x1: u32) -> BoundingBox {
        BoundingBox::new(y0, x0, y1, x1).unwrap()
    }

    #[test]
    fn rasterize_counts() {
        assert_eq!(rasterize(&bx(0, 0, 2, 2), 4, 4).unwrap().count(), 4);
        assert_eq!(rasterize(&bx(0, 0, 4, 4), 4, 4).unwrap().count(), 16);
    }

    #[test]
    fn rasterize_matches_containment_oracle() {
        let b = bx(1, 1, 3, 4);
        let mask = rasterize(&b, 5, 5).unwrap();
        let mut expected = 0;
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..3).contains(&y) && (1..4).contains(&x);
                assert_eq!(mask.get(y, x), inside, "pixel ({y},{x})");
                expected += inside as u64;
            }
        }
        assert_eq!(expected, 6);
        assert_eq!(mask.count(), 6);
    }

    #[test]
    fn rasterize_rejects_out_of_bounds() {
        assert!(matches!(
            rasterize(&bx(0, 0, 5, 2), 4, 4),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn rasterize_spans_word_boundaries() {
        let mask = rasterize(&bx(0, 60, 1, 130), 200, 1).unwrap();
        assert_eq!(mask.count(), 70);
        assert!(!mask.get(0, 59));
        assert!(mask.get(0, 60) && mask.get(0, 63) && mask.get(0, 64) && mask.get(0, 129));
        assert!(!mask.get(0, 130));
    }

    #[test]
    fn overlap_examples() {
        let a = rasterize(&bx(0, 0, 10, 20), 64, 32).unwrap();
        assert_eq!(
            overlap_stats(&a, &a).unwrap(),
            OverlapStats {
                intersection: 200,
                union: 200,
                a: 200,
                b: 200
            }
        );

        let d1 = rasterize(&bx(0, 0, 10, 10), 64, 32).unwrap();
        let d2 = rasterize(&bx(20, 20, 30, 30), 64, 32).unwrap();
        let s = overlap_stats(&d1, &d2).unwrap();
        assert_eq!((s.intersection, s.union, s.a, s.b), (0, 200, 100, 100));

        // 20x10 box against the same box shifted 10 px in x
        let p = rasterize(&bx(0, 0, 10, 20), 64, 32).unwrap();
        let q = rasterize(&bx(0, 10, 10, 30), 64, 32).unwrap();
        let s = overlap_stats(&p, &q).unwrap();
        let mut oracle = (0u64, 0u64);
        for y in 0..32 {
            for x in 0..64 {
                oracle.0 += (p.get(y, x) && q.get(y, x)) as u64;
                oracle.1 += (p.get(y, x) || q.get(y, x)) as u64;
            }
        }
        assert_eq!((s.intersection, s.union), oracle);
        assert_eq!((s.intersection, s.union, s.a, s.b), (100, 300, 200, 200));
        assert!((s.iou() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_shape_mismatch() {
        let a = BinaryMask::new(4, 4);
        let b = BinaryMask::new(4, 5);
        assert!(matches!(overlap_stats(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn to_local_examples() {
        let full = CropRegion::full(100, 50).unwrap();
        let b = bx(5, 80, 20, 90);
        assert_eq!(full.to_local(&b).unwrap(), b);

        let right = CropRegion::new(100, 50, bx(0, 75, 50, 100)).unwrap();
        let local = right.to_local(&b).unwrap();
        assert_eq!((local.x_min(), local.x_max()), (5, 15));
        assert_eq!(right.to_parent(&local).unwrap(), b);

        let outside = bx(0, 0, 10, 10);
        assert!(matches!(
            right.to_local(&outside),
            Err(Error::EmptyIntersection)
        ));
    }

    #[test]
    fn straddling_box_matches_rasterized_oracle() {
        let (w, h) = (100, 40);
        let region = CropRegion::new(w, h, bx(0, 75, 40, 100)).unwrap();
        let b = bx(10, 60, 30, 90);
        let local = region.to_local(&b).unwrap();
        let mut parent = BinaryMask::new(w, h);
        parent
            .paste(&rasterize(&local, region.width(), region.height()).unwrap(), &region)
            .unwrap();
        let oracle = rasterize(&b, w, h)
            .unwrap()
            .intersection(&rasterize(&region.bounds(), w, h).unwrap())
            .unwrap();
        assert_eq!(parent, oracle);
    }

    #[test]
    fn mask_json_uses_rle_record() {
        let m = rasterize(&bx(0, 1, 1, 3), 4, 2).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"width":4,"height":2,"rle":[1,2,5]}"#);
        let back: BinaryMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);

        let starts_set = rasterize(&bx(0, 0, 1, 1), 2, 1).unwrap();
        assert_eq!(starts_set.to_rle(), vec![0, 1, 1]);
        assert!(serde_json::from_str::<BinaryMask>(r#"{"width":4,"height":2,"rle":[1,2]}"#)
            .is_err());
    }

    #[test]
    fn box_json_is_y_x_order() {
        let b = bx(100, 110, 200, 210);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[100,110,200,210]");
        assert!(serde_json::from_str::<BoundingBox>("[5,5,5,9]").is_err());
    }

    #[test]
    fn clipping_and_expansion() {
        assert_eq!(
            BoundingBox::from_f64_clipped([-5.0, 90.4, 20.0, 130.0], 100, 50),
            Some(bx(0, 90, 20, 100))
        );
        assert_eq!(BoundingBox::from_f64_clipped([0.0, 120.0, 10.0, 130.0], 100, 50), None);
        let corner = bx(0, 0, 10, 20);
        assert_eq!(corner.expand_frac(0.1, 100, 50), bx(0, 0, 11, 22));
        assert_eq!(bx(2, 2, 6, 6).erode(1), Some(bx(3, 3, 5, 5)));
        assert_eq!(bx(2, 2, 4, 4).erode(1), None);
    }

    fn arb_mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), (w * h) as usize)
            .prop_map(move |bits| BinaryMask::from_fn(w, h, |y, x| bits[(y * w + x) as usize]))
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(w, h)| (arb_mask(w, h), arb_mask(w, h)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn overlap_matches_brute_force((a, b) in arb_pair()) {
            let s = overlap_stats(&a, &b).unwrap();
            let (mut i, mut u, mut na, mut nb) = (0u64, 0u64, 0u64, 0u64);
            for y in 0..a.height() {
                for x in 0..a.width() {
                    let (pa, pb) = (a.get(y, x), b.get(y, x));
                    i += (pa && pb) as u64;
                    u += (pa || pb) as u64;
                    na += pa as u64;
                    nb += pb as u64;
                }
            }
            prop_assert_eq!(s, OverlapStats { intersection: i, union: u, a: na, b: nb });
        }

        #[test]
        fn inclusion_exclusion((a, b) in arb_pair()) {
            let u = a.union(&b).unwrap().count();
            let i = a.intersection(&b).unwrap().count();
            prop_assert_eq!(u + i, a.count() + b.count());
            prop_assert_eq!(a.union(&b).unwrap(), b.union(&a).unwrap());
            prop_assert!(a.difference(&b).unwrap().intersection(&b).unwrap().is_empty());
        }

        #[test]
        fn rle_round_trip(m in (1u32..=40, 1u32..=40).prop_flat_map(|(w, h)| arb_mask(w, h))) {
            let rle = m.to_rle();
            prop_assert_eq!(BinaryMask::from_rle(m.width(), m.height(), &rle).unwrap(), m);
        }

        #[test]
        fn rasterize_is_monotone(
            y0 in 0u32..30, x0 in 0u32..30, h in 1u32..20, w in 1u32..20,
            gy in 0u32..5, gx in 0u32..5, gy2 in 0u32..5, gx2 in 0u32..5,
        ) {
            let inner = bx(y0 + gy, x0 + gx, y0 + gy + h, x0 + gx + w);
            let outer = bx(y0, x0, y0 + gy + h + gy2, x0 + gx + w + gx2);
            let a = rasterize(&inner, 64, 64).unwrap();
            let b = rasterize(&outer, 64, 64).unwrap();
            prop_assert!(a.is_subset(&b).unwrap());
        }

        #[test]
        fn local_parent_round_trip(
            ry in 0u32..20, rx in 0u32..20, rh in 1u32..30, rw in 1u32..30,
            by in 0u32..30, bxx in 0u32..30, bh in 1u32..10, bw in 1u32..10,
        ) {
            let region = CropRegion::new(64, 64, bx(ry, rx, ry + rh, rx + rw)).unwrap();
            let b = bx(ry + by % rh, rx + bxx % rw, ry + by % rh + bh, rx + bxx % rw + bw);
            if region.bounds().contains(&b) {
                let local = region.to_local(&b).unwrap();
                prop_assert_eq!(region.to_parent(&local).unwrap(), b);
            } else if let Ok(local) = region.to_local(&b) {
                let back = region.to_parent(&local).unwrap();
                prop_assert_eq!(Some(back), b.intersection(&region.bounds()));
            }
        }
    }
}
