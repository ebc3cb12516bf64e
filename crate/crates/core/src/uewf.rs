//! Entropy-weighted fusion of two teachers' probability maps.
//!
//! Each teacher's binary entropy map is block-averaged over `k × k` patches
//! and broadcast back to full resolution; the inverse smoothed entropy is the
//! per-pixel weight of that teacher in a normalized weighted average.

use crate::error::{Error, Result};
use crate::pool::AxisTiling;
use crate::types::{ensure_same_shape, ProbMap};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub k: usize,
    pub eps: f64,
    pub patchify: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 14,
            eps: 1e-8,
            patchify: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("fusion k must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fusion eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub smoothed: bool,
    /// Pooling window used when `smoothed`.
    pub k: usize,
}

impl EntropyMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `−[p·ln(p+ε) + (1−p)·ln(1−p+ε)]` per pixel.
pub fn pixel_entropy(p: &ProbMap, eps: f64) -> EntropyMap {
    let values = p
        .values()
        .iter()
        .map(|p| {
            let q = 1.0 - p;
            // tiny negative values from the ε shift are clipped
            (-(p * (p + eps).ln() + q * (q + eps).ln())).max(0.0)
        })
        .collect();
    EntropyMap {
        height: p.height(),
        width: p.width(),
        values,
        smoothed: false,
        k: 1,
    }
}

/// `k × k` average pooling then nearest upsampling back to full size.
/// Non-divisible sizes are edge-padded symmetrically before pooling.
pub fn smooth_entropy(e: &EntropyMap, k: usize) -> EntropyMap {
    assert!(k >= 1, "pooling window must be positive");
    let (h, w) = (e.height, e.width);
    let rows = AxisTiling::new(h, k);
    let cols = AxisTiling::new(w, k);
    let mut blocks = vec![0.0; rows.blocks * cols.blocks];
    let norm = (k * k) as f64;
    for br in 0..rows.blocks {
        for bc in 0..cols.blocks {
            let mut acc = 0.0;
            for j in br * k..(br + 1) * k {
                let r = rows.source_of(j, h);
                for i in bc * k..(bc + 1) * k {
                    acc += e.values[r * w + cols.source_of(i, w)];
                }
            }
            blocks[br * cols.blocks + bc] = acc / norm;
        }
    }
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let br = rows.block_of(r, k);
        for c in 0..w {
            values.push(blocks[br * cols.blocks + cols.block_of(c, k)]);
        }
    }
    EntropyMap {
        height: h,
        width: w,
        values,
        smoothed: true,
        k,
    }
}

/// `1 / (E + ε)`.
pub fn confidence_weights(e: &EntropyMap, eps: f64) -> Vec<f64> {
    e.values.iter().map(|v| 1.0 / (v + eps)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub fused: ProbMap,
    pub mean_entropy_a: f64,
    pub mean_entropy_b: f64,
}

/// `(w_A·p_A + w_B·p_B) / (w_A + w_B + ε)`.
pub fn fuse(pa: &ProbMap, pb: &ProbMap, cfg: &FusionConfig) -> Result<ProbMap> {
    fuse_detailed(pa, pb, cfg).map(|f| f.fused)
}

pub fn fuse_detailed(pa: &ProbMap, pb: &ProbMap, cfg: &FusionConfig) -> Result<FusionOutput> {
    ensure_same_shape(pa.shape(), pb.shape())?;
    cfg.validate()?;
    let ea = pixel_entropy(pa, cfg.eps);
    let eb = pixel_entropy(pb, cfg.eps);
    let (mean_entropy_a, mean_entropy_b) = (ea.mean(), eb.mean());
    let (ea, eb) = if cfg.patchify {
        (smooth_entropy(&ea, cfg.k), smooth_entropy(&eb, cfg.k))
    } else {
        (ea, eb)
    };
    let wa = confidence_weights(&ea, cfg.eps);
    let wb = confidence_weights(&eb, cfg.eps);
    let fused = pa
        .values()
        .iter()
        .zip(pb.values())
        .zip(wa.iter().zip(&wb))
        .map(|((a, b), (wa, wb))| ((wa * a + wb * b) / (wa + wb + cfg.eps)).clamp(0.0, 1.0))
        .collect();
    Ok(FusionOutput {
        fused: ProbMap::from_raw(pa.height(), pa.width(), fused),
        mean_entropy_a,
        mean_entropy_b,
    })
}
