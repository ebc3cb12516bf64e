//! `pseudoseg` command-line pipeline.
//!
//! Stages communicate only through files:
//!
//! | command   | reads                                   | writes                                   |
//! |-----------|-----------------------------------------|------------------------------------------|
//! | `synth`   |                                         | `data/{images,masks}/*.png`, `dataset.json` |
//! | `appg`    | dataset                                 | `cache/masks/*.png`, `manifest.json`, `splits.json` |
//! | `filter`  | `manifest.json`                         | `cache/valid.json`                        |
//! | `warmup`  | dataset, `valid.json`                   | `teacher.ckpt`, `warmup.json`             |
//! | `train`   | dataset, `splits.json`, `teacher.ckpt`  | `metrics.jsonl`, `best.ckpt`, `last.ckpt`, `train.json` |
//! | `eval`    | dataset, a checkpoint                   | `eval.<checkpoint>.<split>.json`          |
//! | `overlay` | dataset, a checkpoint                   | `overlays/<id>.png`                       |

pub mod commands;
pub mod config;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{parse_assignment, RunConfig, SEED_ENV};
use serde::Serialize;
use serde_json::{Map, Value};
use std::fmt;
use std::path::{Path, PathBuf};

/// An upstream artifact is absent.
#[derive(Debug)]
pub struct MissingArtifact {
    pub path: PathBuf,
    pub producer: &'static str,
}

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing artifact {} (produced by `pseudoseg {}`)",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

pub fn require(path: &Path, producer: &'static str) -> Result<()> {
    if !path.exists() {
        return Err(MissingArtifact {
            path: path.to_path_buf(),
            producer,
        }
        .into());
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "pseudoseg",
    version,
    about = "Pseudo-label driven semi-supervised lesion segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON config file with flat keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Generate pseudo labels for the unlabeled split.
    Appg {
        #[command(flatten)]
        common: Common,
        /// `replay` or `live`.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        labeled_ratio: Option<f64>,
    },
    /// Keep pseudo labels whose foreground fraction exceeds the area threshold.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        area_tau: Option<f64>,
    },
    /// Train and freeze the static teacher on the filtered pseudo labels.
    Warmup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        warmup_epochs: Option<usize>,
    },
    /// Run the dual-teacher training loop (or the supervised-only baseline).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        labeled_ratio: Option<f64>,
        #[arg(long)]
        supervised_only: bool,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Write prediction/ground-truth overlays for a split.
    Overlay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        split: Option<String>,
    },
}

fn put<T: Into<Value>>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.to_string(), v.into());
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.to_string_lossy().into_owned()))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Appg { .. } => "appg",
            Command::Filter { .. } => "filter",
            Command::Warmup { .. } => "warmup",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Overlay { .. } => "overlay",
        }
    }

    /// Config file path and the flag overlay.
    fn overlay(&self) -> Result<(Option<PathBuf>, Map<String, Value>)> {
        let mut m = Map::new();
        let common = match self {
            Command::Synth {
                common,
                count,
                image_size,
            } => {
                put(&mut m, "count", *count);
                put(&mut m, "image_size", *image_size);
                common
            }
            Command::Appg {
                common,
                backend,
                jobs,
                labeled_ratio,
            } => {
                put(&mut m, "backend", backend.clone());
                put(&mut m, "jobs", *jobs);
                put(&mut m, "labeled_ratio", *labeled_ratio);
                common
            }
            Command::Filter { common, area_tau } => {
                put(&mut m, "area_tau", *area_tau);
                common
            }
            Command::Warmup { common, warmup_epochs } => {
                put(&mut m, "warmup_epochs", *warmup_epochs);
                common
            }
            Command::Train {
                common,
                epochs,
                labeled_ratio,
                supervised_only,
                resume: _,
            } => {
                put(&mut m, "epochs", *epochs);
                put(&mut m, "labeled_ratio", *labeled_ratio);
                if *supervised_only {
                    m.insert("supervised_only".into(), Value::Bool(true));
                }
                common
            }
            Command::Eval {
                common,
                checkpoint,
                split,
            }
            | Command::Overlay {
                common,
                checkpoint,
                split,
            } => {
                put(&mut m, "checkpoint", checkpoint.clone());
                put(&mut m, "split", split.clone());
                common
            }
        };
        for s in &common.set {
            let (k, v) = parse_assignment(s)?;
            m.insert(k, v);
        }
        put(&mut m, "data_dir", path_value(&common.data_dir));
        put(&mut m, "cache_dir", path_value(&common.cache_dir));
        put(&mut m, "out_dir", path_value(&common.out_dir));
        put(&mut m, "seed", common.seed);
        Ok((common.config.clone(), m))
    }
}

/// Parse `args` (including the program name) and run the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run_command(cli.command)
}

pub fn run_command(command: Command) -> Result<()> {
    let (file, overrides) = command.overlay()?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(file.as_deref(), env_seed.as_deref(), &overrides)?;
    match command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Appg { .. } => commands::appg(&cfg),
        Command::Filter { .. } => commands::filter(&cfg),
        Command::Warmup { .. } => commands::warmup(&cfg),
        Command::Train { resume, .. } => commands::train(&cfg, resume),
        Command::Eval { .. } => commands::eval(&cfg).map(|_| ()),
        Command::Overlay { .. } => commands::overlay(&cfg),
    }
}
