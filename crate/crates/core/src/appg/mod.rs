//! Training-free pseudo-label generation.
//!
//! An appearance prompt drives a box proposer; the chosen box drives a mask
//! generator; masks covering too little of the image are filtered out. No
//! model parameters are touched anywhere in this module.

mod backend;
pub mod cache;
mod prompt;

pub use backend::{BoxProposer, MaskGenerator};
pub use cache::{build_cache, load_cache, CacheManifest, CacheRecord};
pub use prompt::{compose_prompt, AppearancePrompt, TraitRegistry, DEFAULT_PROMPT_KEY, PHRASE_SEPARATOR};

use crate::types::{BBox, BinaryMask, GrayscaleImage, ScoredBox};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Minimum foreground fraction (exclusive) for a pseudo mask to be kept.
pub const DEFAULT_AREA_TAU: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxPolicy {
    #[default]
    HighestScore,
    UnionAll,
}

impl std::str::FromStr for BoxPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "highest_score" => Ok(Self::HighestScore),
            "union_all" => Ok(Self::UnionAll),
            other => Err(format!(
                "unknown box policy `{other}` (expected highest_score or union_all)"
            )),
        }
    }
}

/// Reconcile several proposals into one box.
///
/// `HighestScore` breaks score ties by smaller area, then by coordinates.
pub fn select_box(candidates: &[ScoredBox], policy: BoxPolicy) -> Option<BBox> {
    match policy {
        BoxPolicy::HighestScore => candidates
            .iter()
            .min_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.bbox.area().cmp(&b.bbox.area()))
                    .then_with(|| a.bbox.cmp(&b.bbox))
            })
            .map(|s| s.bbox),
        BoxPolicy::UnionAll => candidates.iter().map(|s| s.bbox).reduce(|a, b| BBox {
            x0: a.x0.min(b.x0),
            y0: a.y0.min(b.y0),
            x1: a.x1.max(b.x1),
            y1: a.y1.max(b.y1),
        }),
    }
}

/// One image's pseudo-labeling outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub boxes: Vec<ScoredBox>,
    pub mask: Option<BinaryMask>,
    pub area_fraction: f64,
    pub valid: bool,
    pub backend_name: String,
    pub prompt_rendered: String,
    /// Backend error text when a call failed.
    pub failure: Option<String>,
}

fn is_valid(mask: Option<&BinaryMask>, area_fraction: f64, tau: f64) -> bool {
    mask.is_some() && area_fraction > tau
}

/// Run the proposer and mask generator on one image.
///
/// Backend errors become a record with no mask and `valid == false`.
pub fn generate_pseudo_label(
    image: &GrayscaleImage,
    prompt: &AppearancePrompt,
    proposer: &dyn BoxProposer,
    masker: &dyn MaskGenerator,
    policy: BoxPolicy,
    tau: f64,
) -> PseudoLabelRecord {
    let mut record = PseudoLabelRecord {
        image_id: image.id().to_string(),
        boxes: Vec::new(),
        mask: None,
        area_fraction: 0.0,
        valid: false,
        backend_name: format!("{}+{}", proposer.name(), masker.name()),
        prompt_rendered: prompt.rendered.clone(),
        failure: None,
    };
    match proposer.propose(image, prompt) {
        Ok(boxes) => record.boxes = boxes,
        Err(e) => {
            log::warn!("box proposer failed on {}: {e}", image.id());
            record.failure = Some(e.to_string());
            return record;
        }
    }
    let Some(bbox) = select_box(&record.boxes, policy) else {
        return record;
    };
    match masker.segment(image, &bbox) {
        Ok(mask) if mask.shape() == image.shape() => {
            record.area_fraction = mask.area_fraction();
            record.mask = Some(mask.with_id(image.id()));
        }
        Ok(mask) => {
            record.failure = Some(format!(
                "mask generator returned {:?} for a {:?} image",
                mask.shape(),
                image.shape()
            ));
        }
        Err(e) => {
            log::warn!("mask generator failed on {}: {e}", image.id());
            record.failure = Some(e.to_string());
        }
    }
    record.valid = is_valid(record.mask.as_ref(), record.area_fraction, tau);
    record
}

/// Keep records whose mask exists and covers strictly more than `tau` of the image.
pub fn filter_valid(records: &[PseudoLabelRecord], tau: f64) -> Vec<PseudoLabelRecord> {
    records
        .iter()
        .filter(|r| is_valid(r.mask.as_ref(), r.area_fraction, tau))
        .cloned()
        .map(|mut r| {
            r.valid = true;
            r
        })
        .collect()
}

pub(crate) fn cmp_ids(a: &PseudoLabelRecord, b: &PseudoLabelRecord) -> Ordering {
    a.image_id.cmp(&b.image_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, Result};
    use crate::synth::{generate_case, ReplayJitter, ReplayMasker, ReplayProposer, SynthConfig};
    use std::collections::BTreeMap;

    fn sb(x0: usize, y0: usize, x1: usize, y1: usize, score: f64) -> ScoredBox {
        ScoredBox {
            bbox: BBox::new(x0, y0, x1, y1),
            score,
        }
    }

    #[test]
    fn select_box_policies() {
        let a = sb(0, 0, 5, 5, 0.9);
        let b = sb(10, 10, 20, 20, 0.4);
        assert_eq!(select_box(&[a, b], BoxPolicy::HighestScore), Some(a.bbox));
        assert_eq!(select_box(&[], BoxPolicy::HighestScore), None);
        assert_eq!(select_box(&[], BoxPolicy::UnionAll), None);
        let u = select_box(&[sb(10, 10, 20, 20, 0.5), sb(30, 30, 40, 40, 0.7)], BoxPolicy::UnionAll);
        assert_eq!(u, Some(BBox::new(10, 10, 40, 40)));
    }

    #[test]
    fn score_ties_prefer_smaller_then_lexicographic() {
        let big = sb(0, 0, 10, 10, 0.8);
        let small = sb(5, 5, 8, 8, 0.8);
        assert_eq!(select_box(&[big, small], BoxPolicy::HighestScore), Some(small.bbox));
        let left = sb(1, 0, 4, 3, 0.8);
        let right = sb(2, 0, 5, 3, 0.8);
        assert_eq!(select_box(&[right, left], BoxPolicy::HighestScore), Some(left.bbox));
    }

    fn record(area: f64, has_mask: bool) -> PseudoLabelRecord {
        PseudoLabelRecord {
            image_id: format!("r{area}"),
            boxes: vec![],
            mask: has_mask.then(|| BinaryMask::zeros("m", 10, 10)),
            area_fraction: area,
            valid: false,
            backend_name: "t".into(),
            prompt_rendered: "p".into(),
            failure: None,
        }
    }

    #[test]
    fn filter_uses_strict_inequality() {
        let recs = vec![
            record(0.02, true),
            record(0.01, true),
            record(0.005, true),
            record(0.5, false),
        ];
        let kept = filter_valid(&recs, DEFAULT_AREA_TAU);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].image_id, "r0.02");
        assert!(filter_valid(&[record(0.0, true)], DEFAULT_AREA_TAU).is_empty());
    }

    fn replay(jitter: ReplayJitter) -> (Vec<(GrayscaleImage, BinaryMask)>, ReplayProposer, ReplayMasker) {
        let cfg = SynthConfig {
            count: 12,
            ..SynthConfig::default()
        };
        let cases: Vec<_> = (0..cfg.count).map(|i| generate_case(&cfg, i).unwrap()).collect();
        let gts: BTreeMap<_, _> = cases.iter().map(|(i, m)| (i.id().to_string(), m.clone())).collect();
        let p = ReplayProposer::new(gts.clone(), jitter, 9).unwrap();
        let m = ReplayMasker::new(gts, jitter, 9).unwrap();
        (cases, p, m)
    }

    #[test]
    fn zero_jitter_replay_recovers_ground_truth() {
        let (cases, p, m) = replay(ReplayJitter::zero());
        let prompt = compose_prompt(&TraitRegistry::default(), DEFAULT_PROMPT_KEY).unwrap();
        let before = serde_json::to_string(&(&p, &m)).unwrap();
        for (img, gt) in &cases {
            let rec = generate_pseudo_label(img, &prompt, &p, &m, BoxPolicy::HighestScore, DEFAULT_AREA_TAU);
            assert!(rec.valid);
            assert_eq!(rec.mask.as_ref().unwrap().pixels(), gt.pixels());
            assert_eq!(rec.prompt_rendered, "dark oval.dark round.dark lobulated");
        }
        assert_eq!(before, serde_json::to_string(&(&p, &m)).unwrap());
    }

    struct Silent;
    impl BoxProposer for Silent {
        fn name(&self) -> &str {
            "silent"
        }
        fn propose(&self, _: &GrayscaleImage, _: &AppearancePrompt) -> Result<Vec<ScoredBox>> {
            Ok(vec![])
        }
    }

    struct Broken;
    impl BoxProposer for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn propose(&self, _: &GrayscaleImage, _: &AppearancePrompt) -> Result<Vec<ScoredBox>> {
            Err(Error::Backend {
                backend: "broken".into(),
                message: "connection refused".into(),
            })
        }
    }

    struct Tiny;
    impl MaskGenerator for Tiny {
        fn name(&self) -> &str {
            "tiny"
        }
        fn segment(&self, image: &GrayscaleImage, _: &BBox) -> Result<BinaryMask> {
            // 0.5% of a 20x20 image: two pixels
            Ok(BinaryMask::from_fn(image.id(), 20, 20, |r, c| r == 0 && c < 2))
        }
    }

    #[test]
    fn failures_become_invalid_records() {
        let (cases, _, m) = replay(ReplayJitter::zero());
        let prompt = compose_prompt(&TraitRegistry::default(), DEFAULT_PROMPT_KEY).unwrap();
        let img = &cases[0].0;
        let silent = generate_pseudo_label(img, &prompt, &Silent, &m, BoxPolicy::HighestScore, 0.01);
        assert!(silent.mask.is_none() && !silent.valid && silent.failure.is_none());
        let broken = generate_pseudo_label(img, &prompt, &Broken, &m, BoxPolicy::HighestScore, 0.01);
        assert!(broken.mask.is_none() && !broken.valid);
        assert!(broken.failure.unwrap().contains("connection refused"));
    }

    #[test]
    fn small_masks_are_invalid() {
        let img = GrayscaleImage::new("x", 20, 20, vec![0.5; 400]).unwrap();
        let prompt = compose_prompt(&TraitRegistry::default(), DEFAULT_PROMPT_KEY).unwrap();
        struct Fixed;
        impl BoxProposer for Fixed {
            fn name(&self) -> &str {
                "fixed"
            }
            fn propose(&self, _: &GrayscaleImage, _: &AppearancePrompt) -> Result<Vec<ScoredBox>> {
                Ok(vec![ScoredBox {
                    bbox: BBox::new(0, 0, 5, 5),
                    score: 1.0,
                }])
            }
        }
        let rec = generate_pseudo_label(&img, &prompt, &Fixed, &Tiny, BoxPolicy::HighestScore, 0.01);
        assert_eq!(rec.area_fraction, 0.005);
        assert!(rec.mask.is_some());
        assert!(!rec.valid);
    }
}
