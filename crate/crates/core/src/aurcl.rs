//! Reverse contrastive learning on low-confidence pixels.
//!
//! With confidence `C = 1 − p`, the pixels at or above a per-image top-K
//! threshold (floored at `tau_fix`) get their probabilities flipped. Patch
//! features are pooled from the student feature map twice, weighted by the
//! original and by the reversed probabilities, and an InfoNCE objective pulls
//! each patch toward its own reversed counterpart against the other patches of
//! the same image.

use crate::error::{Error, Result};
use crate::pool::AxisTiling;
use crate::types::{ensure_same_shape, BinaryMask, FeatureGrid, ProbMap};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AurclConfig {
    pub reverse_ratio: f64,
    pub tau_fix: f64,
    pub patch_size: usize,
    pub temperature: f64,
    pub eps: f64,
}

impl Default for AurclConfig {
    fn default() -> Self {
        Self {
            reverse_ratio: 0.2,
            tau_fix: 0.2,
            patch_size: 14,
            temperature: 0.1,
            eps: 1e-8,
        }
    }
}

impl AurclConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.reverse_ratio > 0.0 && self.reverse_ratio < 1.0) {
            return bad(format!("reverse_ratio must be in (0, 1), got {}", self.reverse_ratio));
        }
        if !(self.tau_fix > 0.0 && self.tau_fix < 1.0) {
            return bad(format!("tau_fix must be in (0, 1), got {}", self.tau_fix));
        }
        if self.patch_size < 1 {
            return bad("patch_size must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// `C = 1 − p`.
pub fn confidence_map(p: &ProbMap) -> ProbMap {
    ProbMap::from_raw(p.height(), p.width(), p.values().iter().map(|v| 1.0 - v).collect())
}

/// `K = round(r·H·W)` clamped to `[1, H·W]`.
pub fn top_k_count(len: usize, reverse_ratio: f64) -> usize {
    ((reverse_ratio * len as f64).round() as usize).clamp(1, len)
}

/// `max(K-th largest value of C, tau_fix)`.
pub fn adaptive_threshold(c: &ProbMap, reverse_ratio: f64, tau_fix: f64) -> f64 {
    let k = top_k_count(c.len(), reverse_ratio);
    let mut v = c.values().to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    kth.max(tau_fix)
}

/// `1` where `C ≥ τ`.
pub fn low_conf_mask(c: &ProbMap, tau: f64) -> BinaryMask {
    BinaryMask::from_fn("", c.height(), c.width(), |r, col| c.get(r, col) >= tau)
}

/// `p` outside the mask, `1 − p` inside.
pub fn reverse_probs(p: &ProbMap, mask: &BinaryMask) -> Result<ProbMap> {
    ensure_same_shape(p.shape(), mask.shape())?;
    let values = p
        .values()
        .iter()
        .zip(mask.pixels())
        .map(|(v, m)| if *m == 1 { 1.0 - v } else { *v })
        .collect();
    Ok(ProbMap::from_raw(p.height(), p.width(), values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Original,
    Reversed,
}

/// `N × D` patch features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureSet {
    pub n: usize,
    pub d: usize,
    pub features: Vec<f64>,
    pub view: View,
}

impl PatchFeatureSet {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.d..(j + 1) * self.d]
    }
}

struct PatchLayout {
    rows: AxisTiling,
    cols: AxisTiling,
    size: usize,
}

impl PatchLayout {
    fn new(h: usize, w: usize, size: usize) -> Self {
        Self {
            rows: AxisTiling::new(h, size),
            cols: AxisTiling::new(w, size),
            size,
        }
    }

    fn count(&self) -> usize {
        self.rows.blocks * self.cols.blocks
    }

    #[inline]
    fn patch_of(&self, r: usize, c: usize) -> usize {
        self.rows.block_of(r, self.size) * self.cols.blocks + self.cols.block_of(c, self.size)
    }
}

fn check_grid(f: &FeatureGrid, weights: &[f64]) -> Result<()> {
    if f.height * f.width != weights.len() {
        return Err(Error::InvalidValue(format!(
            "feature grid {}x{} does not cover {} weights",
            f.height,
            f.width,
            weights.len()
        )));
    }
    Ok(())
}

fn patch_weight_sums(layout: &PatchLayout, h: usize, w: usize, weights: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; layout.count()];
    for r in 0..h {
        for c in 0..w {
            sums[layout.patch_of(r, c)] += weights[r * w + c];
        }
    }
    sums
}

/// Weight-normalized average of the feature vectors in each patch:
/// `f_j = Σ F(u)·w(u) / (Σ w(u) + ε)` over `u ∈ Ω_j`.
///
/// Sizes not divisible by `patch_size` are padded symmetrically with
/// zero-weight pixels, so border patches simply hold fewer pixels.
pub fn patch_features(
    f: &FeatureGrid,
    weights: &[f64],
    patch_size: usize,
    eps: f64,
    view: View,
) -> Result<PatchFeatureSet> {
    check_grid(f, weights)?;
    let (h, w, d) = (f.height, f.width, f.channels);
    let layout = PatchLayout::new(h, w, patch_size);
    let n = layout.count();
    let sums = patch_weight_sums(&layout, h, w, weights);
    let mut features = vec![0.0; n * d];
    for ch in 0..d {
        let plane = f.channel(ch);
        for r in 0..h {
            for c in 0..w {
                let u = r * w + c;
                features[layout.patch_of(r, c) * d + ch] += plane[u] * weights[u];
            }
        }
    }
    for j in 0..n {
        let den = sums[j] + eps;
        for v in &mut features[j * d..(j + 1) * d] {
            *v /= den;
        }
    }
    Ok(PatchFeatureSet { n, d, features, view })
}

/// Gradients of a scalar with respect to `F` and `w`, given its gradient with
/// respect to the patch features produced by [`patch_features`].
pub fn patch_features_backward(
    f: &FeatureGrid,
    weights: &[f64],
    patch_size: usize,
    eps: f64,
    set: &PatchFeatureSet,
    d_set: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_grid(f, weights)?;
    let (h, w, d) = (f.height, f.width, f.channels);
    let layout = PatchLayout::new(h, w, patch_size);
    let sums = patch_weight_sums(&layout, h, w, weights);
    let hw = h * w;
    let mut d_f = vec![0.0; d * hw];
    let mut d_w = vec![0.0; hw];
    for r in 0..h {
        for c in 0..w {
            let u = r * w + c;
            let j = layout.patch_of(r, c);
            let inv = 1.0 / (sums[j] + eps);
            let g = &d_set[j * d..(j + 1) * d];
            let fj = set.row(j);
            let mut dw = 0.0;
            for ch in 0..d {
                d_f[ch * hw + u] += g[ch] * weights[u] * inv;
                dw += g[ch] * (f.data[ch * hw + u] - fj[ch]);
            }
            d_w[u] = dw * inv;
        }
    }
    Ok((d_f, d_w))
}

fn norm_floor(v: &[f64], eps: f64) -> (f64, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm, norm.max(eps))
}

fn check_pair(orig: &PatchFeatureSet, rev: &PatchFeatureSet) -> Result<()> {
    if orig.n != rev.n || orig.d != rev.d || orig.n == 0 {
        return Err(Error::InvalidValue(format!(
            "patch feature sets must match and be nonempty: {}x{} vs {}x{}",
            orig.n, orig.d, rev.n, rev.d
        )));
    }
    if orig.features.iter().chain(&rev.features).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch features".into()));
    }
    Ok(())
}

/// Per-image InfoNCE with cosine similarity; negatives are the other reversed
/// patches of the same image.
pub fn aurcl_loss(orig: &PatchFeatureSet, rev: &PatchFeatureSet, temperature: f64, eps: f64) -> Result<f64> {
    aurcl_loss_with_grad(orig, rev, temperature, eps).map(|(l, _, _)| l)
}

/// Loss plus gradients with respect to both feature sets.
pub fn aurcl_loss_with_grad(
    orig: &PatchFeatureSet,
    rev: &PatchFeatureSet,
    temperature: f64,
    eps: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(orig, rev)?;
    let (n, d) = (orig.n, orig.d);
    let norms_a: Vec<(f64, f64)> = (0..n).map(|j| norm_floor(orig.row(j), eps)).collect();
    let norms_b: Vec<(f64, f64)> = (0..n).map(|k| norm_floor(rev.row(k), eps)).collect();

    let mut sim = vec![0.0; n * n];
    for j in 0..n {
        let a = orig.row(j);
        for k in 0..n {
            let dot: f64 = a.iter().zip(rev.row(k)).map(|(x, y)| x * y).sum();
            sim[j * n + k] = dot / (norms_a[j].1 * norms_b[k].1);
        }
    }

    let mut loss = 0.0;
    let mut d_sim = vec![0.0; n * n];
    for j in 0..n {
        let logits = &sim[j * n..(j + 1) * n];
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v / temperature));
        let z: f64 = logits.iter().map(|v| (v / temperature - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - logits[j] / temperature;
        for k in 0..n {
            let soft = (logits[k] / temperature - lse).exp();
            let delta = if j == k { 1.0 } else { 0.0 };
            d_sim[j * n + k] = (soft - delta) / (n as f64 * temperature);
        }
    }
    loss /= n as f64;

    let mut d_orig = vec![0.0; n * d];
    let mut d_rev = vec![0.0; n * d];
    for j in 0..n {
        let a = orig.row(j);
        let (na, fa) = norms_a[j];
        for k in 0..n {
            let g = d_sim[j * n + k];
            if g == 0.0 {
                continue;
            }
            let b = rev.row(k);
            let (nb, fb) = norms_b[k];
            let s = sim[j * n + k];
            let scale = 1.0 / (fa * fb);
            for ch in 0..d {
                // below the floor the norm is a constant
                let ga = b[ch] * scale - if na > eps { s * a[ch] / (na * na) } else { 0.0 };
                let gb = a[ch] * scale - if nb > eps { s * b[ch] / (nb * nb) } else { 0.0 };
                d_orig[j * d + ch] += g * ga;
                d_rev[k * d + ch] += g * gb;
            }
        }
    }
    Ok((loss, d_orig, d_rev))
}

/// Everything the trainer needs from one unlabeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct AurclTerm {
    pub loss: f64,
    pub tau: f64,
    pub selected: usize,
    /// Gradient with respect to the `C × H × W` feature grid.
    pub d_features: Vec<f64>,
    /// Gradient with respect to the student probabilities.
    pub d_probs: Vec<f64>,
}

/// Threshold, reverse, pool both views and evaluate the contrastive loss and
/// its gradients. The low-confidence mask is treated as a constant.
pub fn aurcl_forward_backward(p: &ProbMap, features: &FeatureGrid, cfg: &AurclConfig) -> Result<AurclTerm> {
    cfg.validate()?;
    if (features.height, features.width) != p.shape() {
        return Err(Error::ShapeMismatch {
            expected: p.shape(),
            actual: (features.height, features.width),
        });
    }
    let c = confidence_map(p);
    let tau = adaptive_threshold(&c, cfg.reverse_ratio, cfg.tau_fix);
    let mask = low_conf_mask(&c, tau);
    let reversed = reverse_probs(p, &mask)?;

    let orig = patch_features(features, p.values(), cfg.patch_size, cfg.eps, View::Original)?;
    let rev = patch_features(features, reversed.values(), cfg.patch_size, cfg.eps, View::Reversed)?;
    let (loss, d_orig, d_rev) = aurcl_loss_with_grad(&orig, &rev, cfg.temperature, cfg.eps)?;

    let (mut d_features, d_w_orig) =
        patch_features_backward(features, p.values(), cfg.patch_size, cfg.eps, &orig, &d_orig)?;
    let (d_f_rev, d_w_rev) =
        patch_features_backward(features, reversed.values(), cfg.patch_size, cfg.eps, &rev, &d_rev)?;
    for (a, b) in d_features.iter_mut().zip(&d_f_rev) {
        *a += b;
    }
    let d_probs = d_w_orig
        .iter()
        .zip(&d_w_rev)
        .zip(mask.pixels())
        .map(|((a, b), m)| if *m == 1 { a - b } else { a + b })
        .collect();
    Ok(AurclTerm {
        loss,
        tau,
        selected: mask.count(),
        d_features,
        d_probs,
    })
}
