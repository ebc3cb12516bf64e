//! Synthetic breast-ultrasound-like cases and ground-truth replay backends.
//!
//! Each case is a constant bright background with one darker lesion, both
//! modulated by multiplicative speckle. Intensities are quantized to 8 bits so
//! that a PNG round trip is lossless.
//!
//! The replay backends read the ground truth on purpose: they are oracles with
//! controllable degradation (box jitter, boundary warp, dropout) standing in
//! for an open-vocabulary detector and a promptable segmenter.

use crate::appg::{AppearancePrompt, BoxProposer, MaskGenerator};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::types::{BBox, BinaryMask, GrayscaleImage, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionShape {
    Oval,
    Round,
    Lobulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub lesion_shape: LesionShape,
    /// Lesion-to-background intensity ratio, strictly inside (0, 1).
    pub lesion_darkness: f64,
    pub speckle_strength: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            lesion_shape: LesionShape::Lobulated,
            lesion_darkness: 0.65,
            speckle_strength: 0.7,
            seed: 0,
            count: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::InvalidConfig("synth count must be at least 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "synth image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if !(self.lesion_darkness > 0.0 && self.lesion_darkness < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lesion_darkness must be strictly inside (0, 1), got {}",
                self.lesion_darkness
            )));
        }
        if !(self.speckle_strength.is_finite() && self.speckle_strength >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "speckle_strength must be finite and non-negative, got {}",
                self.speckle_strength
            )));
        }
        Ok(())
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn lesion_ellipses(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = cfg.image_size as f64;
    let radius = n * rng.random_range(0.12..0.22);
    let margin = radius * 1.3 + 2.0;
    let cy = rng.random_range(margin..(n - margin));
    let cx = rng.random_range(margin..(n - margin));
    let theta = rng.random_range(0.0..PI);
    match cfg.lesion_shape {
        LesionShape::Round => vec![Ellipse {
            cy,
            cx,
            a: radius,
            b: radius,
            theta,
        }],
        LesionShape::Oval => {
            let b = radius * rng.random_range(0.55..0.8);
            vec![Ellipse {
                cy,
                cx,
                a: radius,
                b,
                theta,
            }]
        }
        LesionShape::Lobulated => {
            let main = Ellipse {
                cy,
                cx,
                a: radius,
                b: radius * rng.random_range(0.65..0.9),
                theta,
            };
            let lobes = rng.random_range(1..=3usize);
            let mut out = vec![main];
            for _ in 0..lobes {
                let phi = rng.random_range(0.0..2.0 * PI);
                let dist = radius * rng.random_range(0.5..0.8);
                let r = radius * rng.random_range(0.4..0.6);
                out.push(Ellipse {
                    cy: cy + dist * phi.sin(),
                    cx: cx + dist * phi.cos(),
                    a: r,
                    b: r * rng.random_range(0.7..1.0),
                    theta: rng.random_range(0.0..PI),
                });
            }
            out
        }
    }
}

/// Unit-variance noise with a short spatial correlation (3×3 box blur of white noise).
fn speckle_field(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                        acc += white[rr as usize * n + cc as usize];
                        cnt += 1.0;
                    }
                }
            }
            // sum of `cnt` unit normals has variance `cnt`
            out[r * n + c] = acc / f64::sqrt(cnt);
        }
    }
    out
}

/// Generate case `index` of the dataset described by `cfg`.
pub fn generate_case(cfg: &SynthConfig, index: usize) -> Result<(GrayscaleImage, BinaryMask)> {
    cfg.validate()?;
    if index >= cfg.count {
        return Err(Error::InvalidValue(format!(
            "case index {index} out of range for count {}",
            cfg.count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let n = cfg.image_size;
    let id = case_id(index);
    let background = rng.random_range(0.5..0.75);
    let lesion = background * cfg.lesion_darkness;
    let shapes = lesion_ellipses(cfg, &mut rng);
    let mask = BinaryMask::from_fn(id.clone(), n, n, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        shapes.iter().any(|e| e.contains(y, x))
    });
    let noise = speckle_field(n, &mut rng);
    let pixels = mask
        .pixels()
        .iter()
        .zip(&noise)
        .map(|(m, z)| {
            let level = if *m == 1 { lesion } else { background };
            let v = (level * (1.0 + cfg.speckle_strength * z)).clamp(0.0, 1.0);
            (v * 255.0).round() / 255.0
        })
        .collect();
    Ok((GrayscaleImage::new(id, n, n, pixels)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayJitter {
    /// Center displacement bound as a fraction of the box extent.
    pub box_center_jitter: f64,
    /// Per-axis size change bound as a fraction of the box extent.
    pub box_scale_jitter: f64,
    /// Amplitude of the radial boundary warp applied to the mask.
    pub mask_boundary_noise: f64,
    /// Probability of returning no box at all.
    pub dropout_rate: f64,
}

impl Default for ReplayJitter {
    fn default() -> Self {
        Self::zero()
    }
}

impl ReplayJitter {
    pub fn zero() -> Self {
        Self {
            box_center_jitter: 0.0,
            box_scale_jitter: 0.0,
            mask_boundary_noise: 0.0,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("box_center_jitter", self.box_center_jitter),
            ("box_scale_jitter", self.box_scale_jitter),
            ("mask_boundary_noise", self.mask_boundary_noise),
            ("dropout_rate", self.dropout_rate),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.dropout_rate >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be below 1, got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Jittered copy of the ground-truth bounding box, or nothing on dropout.
pub fn replay_propose_boxes(gt: &BinaryMask, jitter: &ReplayJitter, seed: u64) -> Result<Vec<ScoredBox>> {
    jitter.validate()?;
    let Some(tight) = BBox::from_mask(gt) else {
        return Ok(Vec::new());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random::<f64>() < jitter.dropout_rate {
        return Ok(Vec::new());
    }
    let (w, h) = (tight.width() as f64, tight.height() as f64);
    let mut sym = || rng.random_range(-1.0..=1.0);
    let dx = (sym() * jitter.box_center_jitter * w).round();
    let dy = (sym() * jitter.box_center_jitter * h).round();
    let sx = sym() * jitter.box_scale_jitter;
    let sy = sym() * jitter.box_scale_jitter;
    // integer growth on both sides keeps the shifted center exact
    let ex = (sx * w / 2.0).round();
    let ey = (sy * h / 2.0).round();

    let clamp_axis = |lo: f64, hi: f64, limit: usize| -> (usize, usize) {
        let lo = lo.clamp(0.0, limit as f64 - 1.0) as usize;
        let hi = (hi.clamp(0.0, limit as f64) as usize).max(lo + 1);
        (lo, hi)
    };
    let (x0, x1) = clamp_axis(tight.x0 as f64 + dx - ex, tight.x1 as f64 + dx + ex, gt.width());
    let (y0, y1) = clamp_axis(tight.y0 as f64 + dy - ey, tight.y1 as f64 + dy + ey, gt.height());
    let score = (-(dx.abs() / w + dy.abs() / h + sx.abs() + sy.abs())).exp();
    Ok(vec![ScoredBox {
        bbox: BBox::new(x0, y0, x1, y1),
        score,
    }])
}

/// Ground truth clipped to `bbox`, with its boundary warped radially by a
/// random low-order Fourier series around the clipped region's centroid.
pub fn replay_box_to_mask(
    image: &GrayscaleImage,
    bbox: &BBox,
    gt: &BinaryMask,
    jitter: &ReplayJitter,
    seed: u64,
) -> Result<BinaryMask> {
    jitter.validate()?;
    crate::types::ensure_same_shape(image.shape(), gt.shape())?;
    let (h, w) = gt.shape();
    let clip = gt.intersect(&bbox.to_mask("", h, w)).with_id(image.id());
    if clip.is_empty() || jitter.mask_boundary_noise == 0.0 {
        return Ok(clip);
    }

    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if clip.get(r, c) {
                sy += r as f64;
                sx += c as f64;
                n += 1.0;
            }
        }
    }
    let (cy, cx) = (sy / n, sx / n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmonics: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let amp = jitter.mask_boundary_noise / 1.5;
    let scale = |theta: f64| {
        let wobble: f64 = harmonics
            .iter()
            .enumerate()
            .map(|(k, (a, phi))| a * ((k as f64 + 1.0) * theta + phi).cos())
            .sum();
        (1.0 + amp * wobble).max(0.05)
    };

    let out = BinaryMask::from_fn(image.id(), h, w, |r, c| {
        if !bbox.contains(r, c) {
            return false;
        }
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let s = scale(dy.atan2(dx));
        let (src_r, src_c) = ((cy + dy / s).round(), (cx + dx / s).round());
        if src_r < 0.0 || src_c < 0.0 || src_r >= h as f64 || src_c >= w as f64 {
            return false;
        }
        clip.get(src_r as usize, src_c as usize)
    });
    Ok(out)
}

fn lookup<'a>(gts: &'a BTreeMap<String, BinaryMask>, backend: &str, id: &str) -> Result<&'a BinaryMask> {
    gts.get(id).ok_or_else(|| Error::Backend {
        backend: backend.to_string(),
        message: format!("no ground truth for image `{id}`"),
    })
}

/// Box proposer that replays jittered ground-truth boxes.
#[derive(Clone, Debug, Serialize)]
pub struct ReplayProposer {
    gts: BTreeMap<String, BinaryMask>,
    jitter: ReplayJitter,
    seed: u64,
}

impl ReplayProposer {
    pub fn new(gts: BTreeMap<String, BinaryMask>, jitter: ReplayJitter, seed: u64) -> Result<Self> {
        jitter.validate()?;
        Ok(Self { gts, jitter, seed })
    }
}

impl BoxProposer for ReplayProposer {
    fn name(&self) -> &str {
        "replay-boxes"
    }

    fn propose(&self, image: &GrayscaleImage, _prompt: &AppearancePrompt) -> Result<Vec<ScoredBox>> {
        let gt = lookup(&self.gts, self.name(), image.id())?;
        replay_propose_boxes(gt, &self.jitter, derive_seed(self.seed, &format!("box:{}", image.id())))
    }
}

/// Mask generator that replays ground truth inside the box with boundary noise.
#[derive(Clone, Debug, Serialize)]
pub struct ReplayMasker {
    gts: BTreeMap<String, BinaryMask>,
    jitter: ReplayJitter,
    seed: u64,
}

impl ReplayMasker {
    pub fn new(gts: BTreeMap<String, BinaryMask>, jitter: ReplayJitter, seed: u64) -> Result<Self> {
        jitter.validate()?;
        Ok(Self { gts, jitter, seed })
    }
}

impl MaskGenerator for ReplayMasker {
    fn name(&self) -> &str {
        "replay-masks"
    }

    fn segment(&self, image: &GrayscaleImage, bbox: &BBox) -> Result<BinaryMask> {
        let gt = lookup(&self.gts, self.name(), image.id())?;
        replay_box_to_mask(
            image,
            bbox,
            gt,
            &self.jitter,
            derive_seed(self.seed, &format!("mask:{}", image.id())),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn cfg(shape: LesionShape) -> SynthConfig {
        SynthConfig {
            image_size: 64,
            lesion_shape: shape,
            lesion_darkness: 0.5,
            speckle_strength: 0.3,
            seed: 11,
            count: 20,
        }
    }

    fn region_means(img: &GrayscaleImage, mask: &BinaryMask) -> (f64, f64) {
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (p, m) in img.pixels().iter().zip(mask.pixels()) {
            if *m == 1 {
                fg += p;
                nf += 1.0;
            } else {
                bg += p;
                nb += 1.0;
            }
        }
        (fg / nf, bg / nb)
    }

    #[test]
    fn lesion_is_darker_for_every_shape() {
        for shape in [LesionShape::Oval, LesionShape::Round, LesionShape::Lobulated] {
            let c = cfg(shape);
            for i in 0..c.count {
                let (img, mask) = generate_case(&c, i).unwrap();
                assert!(mask.area_fraction() > 0.01, "{shape:?} case {i} too small");
                let (fg, bg) = region_means(&img, &mask);
                assert!(fg < bg, "{shape:?} case {i}: {fg} >= {bg}");
            }
        }
    }

    #[test]
    fn zero_speckle_gives_two_levels() {
        let c = SynthConfig {
            speckle_strength: 0.0,
            ..cfg(LesionShape::Oval)
        };
        let (img, mask) = generate_case(&c, 3).unwrap();
        let mut levels: Vec<u64> = img.pixels().iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels.len(), 2);
        let (fg, bg) = region_means(&img, &mask);
        assert!(fg < bg);
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(LesionShape::Lobulated);
        assert_eq!(generate_case(&c, 5).unwrap(), generate_case(&c, 5).unwrap());
        assert_ne!(generate_case(&c, 5).unwrap().1, generate_case(&c, 6).unwrap().1);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = cfg(LesionShape::Round);
        c.lesion_darkness = 1.0;
        assert!(generate_case(&c, 0).is_err());
        let mut c = cfg(LesionShape::Round);
        c.image_size = 16;
        assert!(generate_case(&c, 0).is_err());
        assert!(generate_case(&cfg(LesionShape::Round), 20).is_err());
    }

    #[test]
    fn zero_jitter_proposes_tight_box() {
        let (_, gt) = generate_case(&cfg(LesionShape::Oval), 0).unwrap();
        let boxes = replay_propose_boxes(&gt, &ReplayJitter::zero(), 1).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(Some(boxes[0].bbox), BBox::from_mask(&gt));
        assert_eq!(boxes[0].score, 1.0);
    }

    #[test]
    fn near_certain_dropout_returns_nothing() {
        let (_, gt) = generate_case(&cfg(LesionShape::Oval), 0).unwrap();
        let j = ReplayJitter {
            dropout_rate: 1.0 - 1e-12,
            ..ReplayJitter::zero()
        };
        assert!(replay_propose_boxes(&gt, &j, 42).unwrap().is_empty());
        assert!(
            replay_propose_boxes(&BinaryMask::zeros("e", 8, 8), &ReplayJitter::zero(), 0)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn center_jitter_is_bounded() {
        // 50-pixel-wide lesion in the middle of a 128 grid
        let gt = BinaryMask::from_fn("g", 128, 128, |r, c| (40..90).contains(&r) && (39..89).contains(&c));
        let j = ReplayJitter {
            box_center_jitter: 0.1,
            ..ReplayJitter::zero()
        };
        let tight = BBox::from_mask(&gt).unwrap();
        for seed in 0..200 {
            let b = replay_propose_boxes(&gt, &j, seed).unwrap()[0];
            let (cx, cy) = b.bbox.center();
            let (tx, ty) = tight.center();
            assert!((cx - tx).abs() <= 5.0 && (cy - ty).abs() <= 5.0, "seed {seed}");
            assert!(b.score > 0.0 && b.score <= 1.0);
            assert!(b.bbox.overlaps(&tight));
        }
    }

    #[test]
    fn box_to_mask_identity_and_disjoint() {
        let (img, gt) = generate_case(&cfg(LesionShape::Lobulated), 2).unwrap();
        let tight = BBox::from_mask(&gt).unwrap();
        let m = replay_box_to_mask(&img, &tight, &gt, &ReplayJitter::zero(), 3).unwrap();
        assert_eq!(m.pixels(), gt.pixels());

        let far = if tight.x0 > 4 {
            BBox::new(0, 0, 2, 2)
        } else {
            BBox::new(62, 62, 64, 64)
        };
        let noisy = ReplayJitter {
            mask_boundary_noise: 0.05,
            ..ReplayJitter::zero()
        };
        assert!(replay_box_to_mask(&img, &far, &gt, &noisy, 3).unwrap().is_empty());
    }

    #[test]
    fn boundary_noise_keeps_high_overlap() {
        let c = SynthConfig {
            image_size: 128,
            ..cfg(LesionShape::Lobulated)
        };
        let noisy = ReplayJitter {
            mask_boundary_noise: 0.05,
            ..ReplayJitter::zero()
        };
        let mut checked = 0;
        for i in 0..c.count {
            let (img, gt) = generate_case(&c, i).unwrap();
            if gt.count() < 400 {
                continue;
            }
            for seed in 0..10 {
                let b = BBox::from_mask(&gt).unwrap();
                let m = replay_box_to_mask(&img, &b, &gt, &noisy, seed).unwrap();
                let reference = gt.intersect(&b.to_mask("", 128, 128));
                assert!(m
                    .pixels()
                    .iter()
                    .zip(b.to_mask("", 128, 128).pixels())
                    .all(|(a, inside)| a <= inside));
                let d = dice(&m, &reference).unwrap();
                assert!(d >= 0.85, "case {i} seed {seed}: dice {d}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_jitter_replay_round_trip_is_exact() {
        let c = cfg(LesionShape::Lobulated);
        for i in 0..c.count {
            let (img, gt) = generate_case(&c, i).unwrap();
            let b = replay_propose_boxes(&gt, &ReplayJitter::zero(), i as u64).unwrap()[0].bbox;
            let m = replay_box_to_mask(&img, &b, &gt, &ReplayJitter::zero(), 0).unwrap();
            assert_eq!(dice(&m, &gt).unwrap(), 1.0);
        }
    }
}
