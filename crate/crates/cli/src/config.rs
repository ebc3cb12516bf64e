//! Flat run configuration.
//!
//! Values resolve as flags > `PSEUDOSEG_SEED` (seed only) > config file >
//! defaults. Unknown keys are an error at every layer.

use anyhow::{bail, Context, Result};
use pseudoseg::appg::{BoxPolicy, DEFAULT_AREA_TAU, DEFAULT_PROMPT_KEY};
use pseudoseg::aurcl::AurclConfig;
use pseudoseg::backbone::{PlateauConfig, UNetConfig};
use pseudoseg::losses::LossWeights;
use pseudoseg::synth::{LesionShape, ReplayJitter, SynthConfig};
use pseudoseg::trainer::{TrainConfig, WarmupConfig};
use pseudoseg::uewf::FusionConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "PSEUDOSEG_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Replay,
    Live,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub image_size: usize,
    pub count: usize,
    pub lesion_shape: LesionShape,
    pub lesion_darkness: f64,
    pub speckle_strength: f64,

    pub backend: Backend,
    pub jobs: usize,
    pub prompt_key: String,
    pub box_policy: BoxPolicy,
    pub area_tau: f64,
    pub box_center_jitter: f64,
    pub box_scale_jitter: f64,
    pub mask_boundary_noise: f64,
    pub dropout_rate: f64,

    pub labeled_ratio: f64,

    pub widths: [usize; 3],
    pub groups: usize,

    pub warmup_epochs: usize,
    pub warmup_batch_size: usize,
    pub warmup_lr: f64,
    /// Static-teacher checkpoint; defaults to `<out_dir>/teacher.ckpt`.
    pub teacher_path: Option<PathBuf>,

    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub ema_momentum: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub fusion_k: usize,
    pub fusion_eps: f64,
    pub patchify: bool,
    pub reverse_ratio: f64,
    pub tau_fix: f64,
    pub patch_size: usize,
    pub temperature: f64,
    pub aurcl_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Train a fresh network on the labeled split only.
    pub supervised_only: bool,

    /// `best`, `last`, `teacher`, or a path.
    pub checkpoint: String,
    pub split: SplitName,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let fusion = FusionConfig::default();
        let aurcl = AurclConfig::default();
        let train = TrainConfig::default();
        let warm = WarmupConfig::default();
        let net = UNetConfig::default();
        let weights = LossWeights::default();
        let plateau = PlateauConfig::default();
        Self {
            data_dir: "data".into(),
            cache_dir: "cache".into(),
            out_dir: "runs".into(),
            seed: 0,
            image_size: synth.image_size,
            count: synth.count,
            lesion_shape: synth.lesion_shape,
            lesion_darkness: synth.lesion_darkness,
            speckle_strength: synth.speckle_strength,
            backend: Backend::Replay,
            jobs: 1,
            prompt_key: DEFAULT_PROMPT_KEY.to_string(),
            box_policy: BoxPolicy::default(),
            area_tau: DEFAULT_AREA_TAU,
            box_center_jitter: 0.1,
            box_scale_jitter: 0.1,
            mask_boundary_noise: 0.05,
            dropout_rate: 0.1,
            labeled_ratio: 0.025,
            widths: net.widths,
            groups: net.groups,
            warmup_epochs: warm.epochs,
            warmup_batch_size: warm.batch_size,
            warmup_lr: warm.lr,
            teacher_path: None,
            epochs: train.epochs,
            batch_size: train.batch_size,
            steps_per_epoch: None,
            lr: train.lr,
            ema_momentum: train.ema_momentum,
            lambda_u: weights.lambda_u,
            lambda_c: weights.lambda_c,
            fusion_k: fusion.k,
            fusion_eps: fusion.eps,
            patchify: fusion.patchify,
            reverse_ratio: aurcl.reverse_ratio,
            tau_fix: aurcl.tau_fix,
            patch_size: aurcl.patch_size,
            temperature: aurcl.temperature,
            aurcl_eps: aurcl.eps,
            plateau_factor: plateau.factor,
            plateau_patience: plateau.patience,
            supervised_only: false,
            checkpoint: "best".into(),
            split: SplitName::Test,
        }
    }
}

/// Parse `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let Some((k, v)) = s.split_once('=') else {
        bail!("expected key=value, got `{s}`");
    };
    let key = k.trim().to_string();
    if key.is_empty() {
        bail!("empty key in `{s}`");
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Merge the layers and validate.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &Map<String, Value>) -> Result<Self> {
        let mut merged = Map::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            let Value::Object(obj) = v else {
                bail!("config {} must be a JSON object", path.display());
            };
            merged.extend(obj);
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))?;
            merged.insert("seed".into(), Value::from(seed));
        }
        merged.extend(overrides.clone());
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.jitter().validate()?;
        self.unet()?;
        self.warmup().validate()?;
        self.train().validate()?;
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            bail!("labeled_ratio must be in (0, 1], got {}", self.labeled_ratio);
        }
        if !(self.area_tau.is_finite() && (0.0..1.0).contains(&self.area_tau)) {
            bail!("area_tau must be in [0, 1), got {}", self.area_tau);
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if !self.image_size.is_multiple_of(4) {
            bail!(
                "image_size must be divisible by 4 for the network, got {}",
                self.image_size
            );
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            lesion_shape: self.lesion_shape,
            lesion_darkness: self.lesion_darkness,
            speckle_strength: self.speckle_strength,
            seed: self.seed,
            count: self.count,
        }
    }

    pub fn jitter(&self) -> ReplayJitter {
        ReplayJitter {
            box_center_jitter: self.box_center_jitter,
            box_scale_jitter: self.box_scale_jitter,
            mask_boundary_noise: self.mask_boundary_noise,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn unet(&self) -> Result<UNetConfig> {
        let cfg = UNetConfig {
            widths: self.widths,
            groups: self.groups,
            seed: pseudoseg::seed::derive_seed(self.seed, "init"),
        };
        pseudoseg::backbone::TinyUNet::new(cfg.clone())?;
        Ok(cfg)
    }

    pub fn warmup(&self) -> WarmupConfig {
        WarmupConfig {
            epochs: self.warmup_epochs,
            batch_size: self.warmup_batch_size,
            lr: self.warmup_lr,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            steps_per_epoch: self.steps_per_epoch,
            lr: self.lr,
            ema_momentum: self.ema_momentum,
            weights: LossWeights {
                lambda_u: self.lambda_u,
                lambda_c: self.lambda_c,
            },
            fusion: FusionConfig {
                k: self.fusion_k,
                eps: self.fusion_eps,
                patchify: self.patchify,
            },
            aurcl: AurclConfig {
                reverse_ratio: self.reverse_ratio,
                tau_fix: self.tau_fix,
                patch_size: self.patch_size,
                temperature: self.temperature,
                eps: self.aurcl_eps,
            },
            plateau: PlateauConfig {
                factor: self.plateau_factor,
                patience: self.plateau_patience,
                ..PlateauConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("teacher.ckpt"))
    }

    /// Write `resolved_config.<command>.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("resolved_config.{command}.json"));
        crate::write_json(&path, self)?;
        Ok(path)
    }
}
