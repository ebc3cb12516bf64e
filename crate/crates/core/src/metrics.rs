//! Overlap metrics between binary masks.
//!
//! Empty-vs-empty comparisons score 1.0 so all-background images never
//! produce NaN. Aggregates over a split are per-image means.

use crate::error::Result;
use crate::types::{ensure_same_shape, BinaryMask, ProbMap};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    inter: usize,
    pred: usize,
    gt: usize,
    agree: usize,
    total: usize,
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<Counts> {
    ensure_same_shape(gt.shape(), pred.shape())?;
    let mut c = Counts {
        total: gt.pixels().len(),
        ..Counts::default()
    };
    for (p, g) in pred.pixels().iter().zip(gt.pixels()) {
        c.inter += usize::from(p & g);
        c.pred += usize::from(*p);
        c.gt += usize::from(*g);
        c.agree += usize::from(p == g);
    }
    Ok(c)
}

/// `2|P∩G| / (|P|+|G|)`.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = counts(pred, gt)?;
    if c.pred + c.gt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * c.inter as f64 / (c.pred + c.gt) as f64)
}

/// `|P∩G| / |P∪G|`.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = counts(pred, gt)?;
    let union = c.pred + c.gt - c.inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(c.inter as f64 / union as f64)
}

/// Fraction of pixels where the masks agree.
pub fn pixel_accuracy(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = counts(pred, gt)?;
    Ok(c.agree as f64 / c.total as f64)
}

/// `1` where `p >= threshold`.
pub fn binarize(p: &ProbMap, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn("", p.height(), p.width(), |r, c| p.get(r, c) >= threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub n_images: usize,
}

impl MetricsRecord {
    /// Per-image metrics averaged over `pairs` of `(pred, gt)`.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>,
    {
        let mut acc = MetricsAccumulator::default();
        for (pred, gt) in pairs {
            acc.push(pred, gt)?;
        }
        Ok(acc.finish())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    dice: f64,
    iou: f64,
    acc: f64,
    n: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        self.dice += dice(pred, gt)?;
        self.iou += iou(pred, gt)?;
        self.acc += pixel_accuracy(pred, gt)?;
        self.n += 1;
        Ok(())
    }

    pub fn finish(self) -> MetricsRecord {
        let n = self.n.max(1) as f64;
        MetricsRecord {
            dice: self.dice / n,
            iou: self.iou / n,
            acc: self.acc / n,
            n_images: self.n,
        }
    }
}
