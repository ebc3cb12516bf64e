//! Segmentation losses.
//!
//! `seg_loss = bce_loss + dice_loss` with equal weight. Targets may be hard
//! masks or soft fused pseudo labels; soft targets are used as-is.

use crate::error::{Error, Result};
use crate::types::{ensure_same_shape, sigmoid, ProbMap};
use serde::{Deserialize, Serialize};

/// Probability clamp inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing in numerator and denominator of soft Dice.
pub const DICE_SMOOTH: f64 = 1.0;

fn check(p: &ProbMap, target: &ProbMap) -> Result<()> {
    ensure_same_shape(target.shape(), p.shape())
}

/// Pixel-mean binary cross-entropy.
pub fn bce_loss(p: &ProbMap, target: &ProbMap) -> Result<f64> {
    check(p, target)?;
    let n = p.len() as f64;
    let sum: f64 = p
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    Ok(sum / n)
}

/// `1 − (2Σpt + s) / (Σp + Σt + s)`.
pub fn dice_loss(p: &ProbMap, target: &ProbMap) -> Result<f64> {
    check(p, target)?;
    let (inter, sp, st) = dice_sums(p.values(), target.values());
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH))
}

fn dice_sums(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    p.iter()
        .zip(t)
        .fold((0.0, 0.0, 0.0), |(i, a, b), (p, t)| (i + p * t, a + p, b + t))
}

pub fn seg_loss(p: &ProbMap, target: &ProbMap) -> Result<f64> {
    Ok(bce_loss(p, target)? + dice_loss(p, target)?)
}

/// `seg_loss(σ(logits), target)` and its gradient with respect to the logits.
pub fn seg_loss_logits(logits: &[f64], target: &ProbMap) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::InvalidValue(format!(
            "{} logits for a target of {} pixels",
            logits.len(),
            target.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let p: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
    let t = target.values();
    let n = p.len() as f64;

    let mut bce = 0.0;
    for (p, t) in p.iter().zip(t) {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        bce -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    bce /= n;

    let (inter, sp, st) = dice_sums(&p, t);
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + st + DICE_SMOOTH;
    let dice = 1.0 - num / den;

    let grad = p
        .iter()
        .zip(t)
        .map(|(p, t)| {
            // d bce / dz collapses to (p - t) off the clamp
            let g_bce = if *p > BCE_EPS && *p < 1.0 - BCE_EPS {
                (p - t) / n
            } else {
                0.0
            };
            let g_dice_p = -(2.0 * t * den - num) / (den * den);
            g_bce + g_dice_p * p * (1.0 - p)
        })
        .collect();
    Ok((bce + dice, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_c: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_u", self.lambda_u), ("lambda_c", self.lambda_c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub total: f64,
}

/// `l_s + λu·l_u + λc·l_c`.
pub fn total_loss(l_s: f64, l_u: f64, l_c: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_s,
        l_u,
        l_c,
        total: l_s + w.lambda_u * l_u + w.lambda_c * l_c,
    }
}
