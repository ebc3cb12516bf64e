//! On-disk pseudo-label cache: `masks/<image_id>.png` plus `manifest.json`.

use super::{
    cmp_ids, generate_pseudo_label, AppearancePrompt, BoxPolicy, BoxProposer, MaskGenerator, PseudoLabelRecord,
};
use crate::error::{Error, Result};
use crate::raster::{read_mask, write_mask};
use crate::types::{GrayscaleImage, ScoredBox};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MASK_DIR: &str = "masks";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheRecord {
    pub image_id: String,
    pub boxes: Vec<ScoredBox>,
    /// Relative to the cache directory.
    pub mask_path: Option<String>,
    pub area_fraction: f64,
    pub valid: bool,
    pub backend_name: String,
    pub prompt_rendered: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub prompt: String,
    pub policy: BoxPolicy,
    pub tau: f64,
    pub n_records: usize,
    pub n_valid: usize,
    pub n_invalid: usize,
    pub records: Vec<CacheRecord>,
}

impl CacheManifest {
    pub fn from_records(records: &[PseudoLabelRecord], prompt: &str, policy: BoxPolicy, tau: f64) -> Self {
        let entries: Vec<CacheRecord> = records
            .iter()
            .map(|r| CacheRecord {
                image_id: r.image_id.clone(),
                boxes: r.boxes.clone(),
                mask_path: r.mask.as_ref().map(|_| format!("{MASK_DIR}/{}.png", r.image_id)),
                area_fraction: r.area_fraction,
                valid: r.valid,
                backend_name: r.backend_name.clone(),
                prompt_rendered: r.prompt_rendered.clone(),
                failure: r.failure.clone(),
            })
            .collect();
        let n_valid = entries.iter().filter(|r| r.valid).count();
        Self {
            prompt: prompt.to_string(),
            policy,
            tau,
            n_records: entries.len(),
            n_valid,
            n_invalid: entries.len() - n_valid,
            records: entries,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn generate_all(
    images: &[GrayscaleImage],
    prompt: &AppearancePrompt,
    proposer: &dyn BoxProposer,
    masker: &dyn MaskGenerator,
    policy: BoxPolicy,
    tau: f64,
    jobs: usize,
) -> Vec<PseudoLabelRecord> {
    let run = |chunk: &[GrayscaleImage]| -> Vec<PseudoLabelRecord> {
        chunk
            .iter()
            .map(|img| generate_pseudo_label(img, prompt, proposer, masker, policy, tau))
            .collect()
    };
    let jobs = jobs.max(1);
    if jobs == 1 || images.len() < 2 {
        return run(images);
    }
    let chunk = images.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = images.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("pseudo-label worker panicked"))
            .collect()
    })
}

/// Pseudo-label every image and persist the result under `cache_dir`.
///
/// Generation may fan out over `jobs` threads; all files are written from the
/// calling thread, in image-id order.
#[allow(clippy::too_many_arguments)]
pub fn build_cache(
    images: &[GrayscaleImage],
    prompt: &AppearancePrompt,
    proposer: &dyn BoxProposer,
    masker: &dyn MaskGenerator,
    policy: BoxPolicy,
    tau: f64,
    cache_dir: &Path,
    jobs: usize,
) -> Result<(CacheManifest, Vec<PseudoLabelRecord>)> {
    let mut records = generate_all(images, prompt, proposer, masker, policy, tau, jobs);
    records.sort_by(cmp_ids);
    let mask_dir = cache_dir.join(MASK_DIR);
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for r in &records {
        if let Some(mask) = &r.mask {
            write_mask(&mask_dir.join(format!("{}.png", r.image_id)), mask)?;
        }
    }
    let manifest = CacheManifest::from_records(&records, &prompt.rendered, policy, tau);
    manifest.write(&cache_dir.join(MANIFEST_FILE))?;
    log::info!(
        "pseudo-label cache: {} records, {} valid, {} invalid",
        manifest.n_records,
        manifest.n_valid,
        manifest.n_invalid
    );
    Ok((manifest, records))
}

/// Load a manifest (by file name within `cache_dir`) and its masks.
pub fn load_cache(cache_dir: &Path, manifest_file: &str) -> Result<(CacheManifest, Vec<PseudoLabelRecord>)> {
    let manifest = CacheManifest::read(&cache_dir.join(manifest_file))?;
    let records = manifest
        .records
        .iter()
        .map(|e| {
            let mask = e
                .mask_path
                .as_ref()
                .map(|p| read_mask(&cache_dir.join(p), e.image_id.clone()))
                .transpose()?;
            Ok(PseudoLabelRecord {
                image_id: e.image_id.clone(),
                boxes: e.boxes.clone(),
                mask,
                area_fraction: e.area_fraction,
                valid: e.valid,
                backend_name: e.backend_name.clone(),
                prompt_rendered: e.prompt_rendered.clone(),
                failure: e.failure.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}
