//! Image, mask and probability grids.
//!
//! All grids are row-major `height × width`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidValue(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    if height * width != len {
        return Err(Error::InvalidValue(format!(
            "grid of {height}x{width} needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Normalized grayscale intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayscaleImage {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayscaleImage {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_len(height, width, pixels.len())?;
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("image pixel {bad} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Strictly binary mask (`0` background, `1` foreground).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        check_len(height, width, pixels.len())?;
        if let Some(bad) = pixels.iter().find(|v| **v > 1) {
            return Err(Error::InvalidValue(format!("mask value {bad} is not binary")));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            id: id.into(),
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn from_fn(
        id: impl Into<String>,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(u8::from(f(r, c)));
            }
        }
        Self {
            id: id.into(),
            height,
            width,
            pixels,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels divided by `height × width`.
    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Pixel-wise AND. Panics on shape mismatch.
    pub fn intersect(&self, other: &BinaryMask) -> Self {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        Self {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| a & b).collect(),
        }
    }

    /// Tight half-open bounding box `(x0, y0, x1, y1)`, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bounds = Some(match bounds {
                        None => (c, r, c + 1, r + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c + 1), y1.max(r + 1)),
                    });
                }
            }
        }
        bounds
    }

    pub fn to_prob(&self) -> ProbMap {
        ProbMap {
            height: self.height,
            width: self.width,
            values: self.pixels.iter().map(|v| f64::from(*v)).collect(),
        }
    }
}

/// Per-pixel probabilities in `[0, 1]`, finite everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_len(height, width, values.len())?;
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("probability map".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Elementwise logistic sigmoid of a logit grid.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        check_len(height, width, logits.len())?;
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self {
            height,
            width,
            values: logits.iter().map(|z| sigmoid(*z)).collect(),
        })
    }

    /// Construct without range checks. Callers guarantee the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(height * width, values.len());
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}


/// Axis-aligned box in pixel coordinates, half-open: columns `x0..x1`, rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..self.y1).contains(&row) && (self.x0..self.x1).contains(&col)
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn from_mask(mask: &BinaryMask) -> Option<Self> {
        mask.bounding_box().map(|(x0, y0, x1, y1)| Self { x0, y0, x1, y1 })
    }

    pub fn to_mask(&self, id: impl Into<String>, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(id, height, width, |r, c| self.contains(r, c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Channel-major `channels × height × width` feature tensor for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || channels == 0 {
            return Err(Error::InvalidValue(format!(
                "feature grid {channels}x{height}x{width} does not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}
