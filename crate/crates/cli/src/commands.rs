//! Subcommand implementations.

use crate::config::{Backend, RunConfig, SplitName};
use crate::{read_json, require, write_json};
use anyhow::{anyhow, bail, Context, Result};
use pseudoseg::appg::{build_cache, compose_prompt, filter_valid, load_cache, CacheManifest, TraitRegistry};
use pseudoseg::backbone::checkpoint::{config_hash, Checkpoint};
use pseudoseg::backbone::{BackboneHandle, TinyUNet};
use pseudoseg::metrics::binarize;
use pseudoseg::raster::{read_image, read_mask, write_image, write_mask, write_overlay};
use pseudoseg::synth::{case_id, generate_case, ReplayMasker, ReplayProposer};
use pseudoseg::trainer::{
    evaluate, load_params, params_checkpoint, plan_epoch, warmup_static_teacher, LabeledSample, TrainData,
    TrainerState, WarmupReport, EVAL_THRESHOLD,
};
use pseudoseg::{make_splits, BinaryMask, GrayscaleImage, MetricsRecord, SplitManifest};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DATASET_FILE: &str = "dataset.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const VALID_FILE: &str = "valid.json";
pub const WARMUP_FILE: &str = "warmup.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAIN_FILE: &str = "train.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub seed: u64,
    pub ids: Vec<String>,
}

/// Images and ground-truth masks of a synthesized dataset, keyed by id.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: BTreeMap<String, GrayscaleImage>,
    pub masks: BTreeMap<String, BinaryMask>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_FILE);
        require(&path, "synth")?;
        let manifest: DatasetManifest = read_json(&path)?;
        let mut images = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for id in &manifest.ids {
            let ip = dir.join("images").join(format!("{id}.png"));
            let mp = dir.join("masks").join(format!("{id}.png"));
            require(&ip, "synth")?;
            require(&mp, "synth")?;
            images.insert(id.clone(), read_image(&ip, id.clone())?);
            masks.insert(id.clone(), read_mask(&mp, id.clone())?);
        }
        Ok(Self {
            manifest,
            images,
            masks,
        })
    }

    pub fn sample(&self, id: &str) -> Result<LabeledSample> {
        let image = self.images.get(id).ok_or_else(|| anyhow!("unknown image id {id}"))?;
        Ok(LabeledSample::new(image.clone(), self.masks[id].clone())?)
    }

    pub fn samples(&self, ids: &[String]) -> Result<Vec<LabeledSample>> {
        ids.iter().map(|id| self.sample(id)).collect()
    }

    pub fn splits(&self, cfg: &RunConfig) -> Result<SplitManifest> {
        Ok(make_splits(&self.manifest.ids, cfg.labeled_ratio, cfg.seed)?)
    }
}

fn split_ids(s: &SplitManifest, which: SplitName) -> &[String] {
    match which {
        SplitName::Labeled => &s.labeled_ids,
        SplitName::Unlabeled => &s.unlabeled_ids,
        SplitName::Val => &s.val_ids,
        SplitName::Test => &s.test_ids,
    }
}

/// The split recorded by `appg` must match the one implied by the config.
fn cached_splits(cfg: &RunConfig, data: &Dataset) -> Result<SplitManifest> {
    let path = cfg.cache_dir.join(SPLITS_FILE);
    require(&path, "appg")?;
    let cached: SplitManifest = read_json(&path)?;
    let now = data.splits(cfg)?;
    if cached != now {
        bail!(
            "{} was built with labeled_ratio {} and seed {}, but the config asks for {} and {}; re-run `pseudoseg appg`",
            path.display(),
            cached.labeled_ratio,
            cached.seed,
            cfg.labeled_ratio,
            cfg.seed
        );
    }
    Ok(now)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let sc = cfg.synth();
    let dir = &cfg.data_dir;
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    let mut ids = Vec::with_capacity(sc.count);
    for i in 0..sc.count {
        let (img, mask) = generate_case(&sc, i)?;
        let id = case_id(i);
        write_image(&dir.join("images").join(format!("{id}.png")), &img)?;
        write_mask(&dir.join("masks").join(format!("{id}.png")), &mask)?;
        ids.push(id);
    }
    let manifest = DatasetManifest {
        image_size: sc.image_size,
        seed: sc.seed,
        ids,
    };
    write_json(&dir.join(DATASET_FILE), &manifest)?;
    cfg.write_resolved(dir, "synth")?;
    println!("synth: wrote {} cases to {}", sc.count, dir.display());
    Ok(())
}

pub fn appg(cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(&cfg.data_dir)?;
    let splits = data.splits(cfg)?;
    let prompt = compose_prompt(&TraitRegistry::default(), &cfg.prompt_key)?;
    if cfg.backend == Backend::Live {
        bail!("the live backend needs an external box proposer and mask generator, which this build does not provide; use --backend replay");
    }
    let gts: BTreeMap<String, BinaryMask> = splits
        .unlabeled_ids
        .iter()
        .map(|id| (id.clone(), data.masks[id].clone()))
        .collect();
    let proposer = ReplayProposer::new(gts.clone(), cfg.jitter(), cfg.seed)?;
    let masker = ReplayMasker::new(gts, cfg.jitter(), cfg.seed)?;
    let images: Vec<GrayscaleImage> = splits.unlabeled_ids.iter().map(|id| data.images[id].clone()).collect();
    let (manifest, _) = build_cache(
        &images,
        &prompt,
        &proposer,
        &masker,
        cfg.box_policy,
        cfg.area_tau,
        &cfg.cache_dir,
        cfg.jobs,
    )?;
    write_json(&cfg.cache_dir.join(SPLITS_FILE), &splits)?;
    cfg.write_resolved(&cfg.cache_dir, "appg")?;
    println!(
        "appg: {} records, {} valid, {} invalid",
        manifest.n_records, manifest.n_valid, manifest.n_invalid
    );
    Ok(())
}

pub fn filter(cfg: &RunConfig) -> Result<()> {
    let path = cfg.cache_dir.join(pseudoseg::appg::cache::MANIFEST_FILE);
    require(&path, "appg")?;
    let (manifest, records) = load_cache(&cfg.cache_dir, pseudoseg::appg::cache::MANIFEST_FILE)?;
    let valid = filter_valid(&records, cfg.area_tau);
    let out = CacheManifest::from_records(&valid, &manifest.prompt, manifest.policy, cfg.area_tau);
    out.write(&cfg.cache_dir.join(VALID_FILE))?;
    cfg.write_resolved(&cfg.cache_dir, "filter")?;
    println!("filter: kept {} of {} records", valid.len(), records.len());
    Ok(())
}

fn model_hash(cfg: &RunConfig) -> Result<String> {
    Ok(config_hash(&cfg.unet()?)?)
}

fn template(cfg: &RunConfig) -> Result<TinyUNet> {
    Ok(TinyUNet::new(cfg.unet()?)?)
}

pub fn warmup(cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(&cfg.data_dir)?;
    cached_splits(cfg, &data)?;
    let valid_path = cfg.cache_dir.join(VALID_FILE);
    require(&valid_path, "filter")?;
    let (_, records) = load_cache(&cfg.cache_dir, VALID_FILE)?;
    let samples = records
        .into_iter()
        .filter_map(|r| r.mask.map(|m| (r.image_id, m)))
        .map(|(id, mask)| {
            let image = data
                .images
                .get(&id)
                .ok_or_else(|| anyhow!("cache refers to unknown image {id}"))?;
            Ok(LabeledSample::new(image.clone(), mask)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let (teacher, report) = warmup_static_teacher(template(cfg)?, &samples, &cfg.warmup())?;
    let ck = params_checkpoint(
        &teacher,
        model_hash(cfg)?,
        cfg.warmup_epochs,
        json!({ "role": "static_teacher", "n_samples": samples.len() }),
    );
    let path = cfg.teacher_path();
    ck.save(&path)?;
    write_json(&cfg.out_dir.join(WARMUP_FILE), &report)?;
    cfg.write_resolved(&cfg.out_dir, "warmup")?;
    println!(
        "warmup: {} samples, final loss {:.5}, train dice {:.4}; teacher saved to {}",
        samples.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.train.dice,
        path.display()
    );
    Ok(())
}

fn load_teacher(cfg: &RunConfig) -> Result<BackboneHandle<TinyUNet>> {
    let path = cfg.teacher_path();
    require(&path, "warmup")?;
    let ck = Checkpoint::load(&path)?;
    ck.check_config(&model_hash(cfg)?)
        .context("teacher checkpoint was trained with different network settings")?;
    let mut h = load_params(template(cfg)?, &ck)?;
    h.freeze();
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub supervised_only: bool,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub steps_per_epoch: usize,
    pub start: MetricsRecord,
    pub epochs: usize,
    pub best_val_dice: Option<f64>,
}

fn write_metrics(path: &Path, history: &[pseudoseg::trainer::EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let data = Dataset::load(&cfg.data_dir)?;
    let splits = if cfg.supervised_only {
        data.splits(cfg)?
    } else {
        cached_splits(cfg, &data)?
    };
    let labeled = data.samples(&splits.labeled_ids)?;
    let val = data.samples(&splits.val_ids)?;
    let unlabeled: Vec<GrayscaleImage> = if cfg.supervised_only {
        Vec::new()
    } else {
        splits.unlabeled_ids.iter().map(|id| data.images[id].clone()).collect()
    };

    let mut tc = cfg.train();
    if cfg.supervised_only {
        tc.weights.lambda_u = 0.0;
        tc.weights.lambda_c = 0.0;
        // same number of optimizer steps as the full pipeline on this split
        tc.steps_per_epoch = Some(tc.steps_per_epoch.unwrap_or_else(|| {
            plan_epoch(
                labeled.len(),
                splits.unlabeled_ids.len(),
                tc.batch_size,
                None,
                tc.seed,
                1,
            )
            .len()
        }));
    }
    let steps = plan_epoch(
        labeled.len(),
        unlabeled.len(),
        tc.batch_size,
        tc.steps_per_epoch,
        tc.seed,
        1,
    )
    .len();

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let last = out.join(LAST_CKPT);
    let mut state = if resume {
        require(&last, "train")?;
        TrainerState::from_checkpoint(template(cfg)?, &Checkpoint::load(&last)?, tc.clone())
            .context("cannot resume from last.ckpt")?
    } else if cfg.supervised_only {
        let fresh = BackboneHandle::new(template(cfg)?);
        let mut placeholder = fresh.clone();
        placeholder.freeze();
        TrainerState::new(fresh, placeholder, tc.clone())?
    } else {
        TrainerState::from_static_teacher(load_teacher(cfg)?, tc.clone())?
    };
    cfg.write_resolved(out, "train")?;

    let hash = model_hash(cfg)?;
    let metrics_path = out.join(METRICS_FILE);
    let best_path = out.join(BEST_CKPT);
    write_metrics(&metrics_path, &state.history)?;
    let train_data = TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        val: &val,
    };
    let outcome = state.train(&train_data, |st, rec, improved| {
        st.to_checkpoint()?.save(&last)?;
        if improved {
            let best = st.best_handle()?;
            params_checkpoint(&best, hash.clone(), rec.epoch, json!({ "val_dice": rec.val_dice })).save(&best_path)?;
        }
        write_metrics(&metrics_path, &st.history).map_err(|e| pseudoseg::Error::InvalidValue(format!("{e:#}")))?;
        println!(
            "epoch {:>3}  total {:.4}  l_s {:.4}  l_u {:.4}  l_c {:.4}  val_dice {:.4}",
            rec.epoch, rec.total, rec.l_s, rec.l_u, rec.l_c, rec.val_dice
        );
        Ok(())
    })?;
    if state.best.is_none() {
        params_checkpoint(
            &state.student,
            hash.clone(),
            0,
            json!({ "val_dice": outcome.start.dice }),
        )
        .save(&best_path)?;
    }
    if !last.exists() {
        state.to_checkpoint()?.save(&last)?;
    }
    let summary = TrainSummary {
        supervised_only: cfg.supervised_only,
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
        steps_per_epoch: steps,
        start: outcome.start,
        epochs: state.epoch,
        best_val_dice: outcome.best_val_dice,
    };
    write_json(&out.join(TRAIN_FILE), &summary)?;
    println!(
        "train: {} labeled, {} unlabeled, {} epochs, best val dice {}",
        summary.n_labeled,
        summary.n_unlabeled,
        summary.epochs,
        summary.best_val_dice.map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    Ok(())
}

/// Checkpoint label used in output names, and its path.
fn checkpoint_path(cfg: &RunConfig) -> (String, PathBuf, &'static str) {
    match cfg.checkpoint.as_str() {
        "best" => ("best".into(), cfg.out_dir.join(BEST_CKPT), "train"),
        "last" => ("last".into(), cfg.out_dir.join(LAST_CKPT), "train"),
        "teacher" => ("teacher".into(), cfg.teacher_path(), "warmup"),
        other => {
            let p = PathBuf::from(other);
            let label = p
                .file_stem()
                .map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
            (label, p, "train")
        }
    }
}

fn load_model(cfg: &RunConfig) -> Result<(String, BackboneHandle<TinyUNet>)> {
    let (label, path, producer) = checkpoint_path(cfg);
    require(&path, producer)?;
    let ck = Checkpoint::load(&path)?;
    let mut h = BackboneHandle::new(template(cfg)?);
    let values = ck.array("params").or_else(|_| ck.array("student"))?;
    h.params_mut()?.load(values)?;
    Ok((label, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: SplitName,
    pub threshold: f64,
    pub metrics: MetricsRecord,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let data = Dataset::load(&cfg.data_dir)?;
    let splits = data.splits(cfg)?;
    let (label, model) = load_model(cfg)?;
    let samples = data.samples(split_ids(&splits, cfg.split))?;
    let metrics = evaluate(&model, &samples)?;
    let report = EvalReport {
        checkpoint: label.clone(),
        split: cfg.split,
        threshold: EVAL_THRESHOLD,
        metrics,
    };
    let split_name = serde_json::to_value(cfg.split)?;
    let split_name = split_name.as_str().unwrap_or("split");
    write_json(&cfg.out_dir.join(format!("eval.{label}.{split_name}.json")), &report)?;
    cfg.write_resolved(&cfg.out_dir, "eval")?;
    println!(
        "eval {label} on {split_name} ({} images): dice {:.4}  iou {:.4}  acc {:.4}",
        metrics.n_images, metrics.dice, metrics.iou, metrics.acc
    );
    Ok(report)
}

pub fn overlay(cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(&cfg.data_dir)?;
    let splits = data.splits(cfg)?;
    let (_, model) = load_model(cfg)?;
    let dir = cfg.out_dir.join("overlays");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ids = split_ids(&splits, cfg.split);
    for id in ids {
        let s = data.sample(id)?;
        let pred = binarize(&model.predict(&s.image)?, EVAL_THRESHOLD);
        write_overlay(&dir.join(format!("{id}.png")), &s.image, &pred, &s.mask)?;
    }
    cfg.write_resolved(&cfg.out_dir, "overlay")?;
    println!("overlay: wrote {} images to {}", ids.len(), dir.display());
    Ok(())
}

/// Warm-up report as written by `warmup`.
pub fn read_warmup_report(out_dir: &Path) -> Result<WarmupReport> {
    read_json(&out_dir.join(WARMUP_FILE))
}
