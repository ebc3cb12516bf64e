use super::{evaluate, plan_epoch, train_step, LabeledSample, StepReport, TrainConfig};
use crate::backbone::checkpoint::{config_hash, Checkpoint};
use crate::backbone::{Adam, AdamConfig, BackboneHandle, ParamSnapshot, PlateauScheduler, SegNet};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::types::GrayscaleImage;
use serde::{Deserialize, Serialize};
use serde_json::json;

const MODULE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pools a training run draws from.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub labeled: &'a [LabeledSample],
    pub unlabeled: &'a [GrayscaleImage],
    pub val: &'a [LabeledSample],
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_s: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub total: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub tau_mean: f64,
    pub mask_frac: f64,
    pub entropy_a: f64,
    pub entropy_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Validation metrics of the student before the first epoch of this call.
    pub start: MetricsRecord,
    /// Every epoch record so far, including ones restored from a checkpoint.
    pub history: Vec<EpochRecord>,
    pub best_val_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainerState<N> {
    pub student: BackboneHandle<N>,
    pub static_teacher: BackboneHandle<N>,
    pub ema_teacher: BackboneHandle<N>,
    pub optimizer: Adam,
    pub scheduler: PlateauScheduler,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<(f64, ParamSnapshot)>,
    pub config: TrainConfig,
    static_digest: String,
}

impl<N: SegNet> TrainerState<N> {
    /// The EMA teacher starts as an exact copy of `student`.
    pub fn new(student: BackboneHandle<N>, static_teacher: BackboneHandle<N>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !static_teacher.is_frozen() {
            return Err(Error::InvalidValue("static teacher must be frozen".into()));
        }
        if !student.params().same_layout(static_teacher.params()) {
            return Err(Error::InvalidValue("student and static teacher layouts differ".into()));
        }
        let student = student.thawed_clone();
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            student.params().len(),
        );
        Ok(Self {
            ema_teacher: student.clone(),
            static_digest: static_teacher.params().digest(),
            student,
            static_teacher,
            optimizer,
            scheduler: PlateauScheduler::new(config.plateau),
            epoch: 0,
            history: Vec::new(),
            best: None,
            config,
        })
    }

    /// Student initialized from the frozen static teacher's weights.
    pub fn from_static_teacher(static_teacher: BackboneHandle<N>, config: TrainConfig) -> Result<Self> {
        let student = static_teacher.thawed_clone();
        Self::new(student, static_teacher, config)
    }

    fn check_static_teacher(&self) -> Result<()> {
        if !self.static_teacher.is_frozen() || self.static_teacher.params().digest() != self.static_digest {
            return Err(Error::InvalidValue(
                "static teacher parameters changed during training".into(),
            ));
        }
        Ok(())
    }

    /// Handle with the best validation Dice seen so far, or the current student.
    pub fn best_handle(&self) -> Result<BackboneHandle<N>> {
        let mut h = self.student.clone();
        if let Some((_, snap)) = &self.best {
            h.restore(snap)?;
        }
        Ok(h)
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochRecord> {
        let cfg = &self.config;
        let epoch = self.epoch + 1;
        let plans = plan_epoch(
            data.labeled.len(),
            data.unlabeled.len(),
            cfg.batch_size,
            cfg.steps_per_epoch,
            cfg.seed,
            epoch,
        );
        let lr = self.optimizer.lr;
        let mut mean = StepReport::default();
        let n = plans.len() as f64;
        for plan in &plans {
            let labeled: Vec<&LabeledSample> = plan.labeled.iter().map(|i| &data.labeled[*i]).collect();
            let unlabeled: Vec<&GrayscaleImage> = plan.unlabeled.iter().map(|i| &data.unlabeled[*i]).collect();
            let r = train_step(self, &labeled, &unlabeled)?;
            mean.losses.l_s += r.losses.l_s / n;
            mean.losses.l_u += r.losses.l_u / n;
            mean.losses.l_c += r.losses.l_c / n;
            mean.losses.total += r.losses.total / n;
            mean.tau_mean += r.tau_mean / n;
            mean.mask_frac += r.mask_frac / n;
            mean.entropy_a += r.entropy_a / n;
            mean.entropy_b += r.entropy_b / n;
        }
        self.check_static_teacher()?;
        let val = evaluate(&self.student, data.val)?;
        self.optimizer.lr = self.scheduler.observe(val.dice, lr);
        if self.best.as_ref().is_none_or(|(d, _)| val.dice > *d) {
            self.best = Some((val.dice, self.student.snapshot()));
        }
        self.epoch = epoch;
        let rec = EpochRecord {
            epoch,
            l_s: mean.losses.l_s,
            l_u: mean.losses.l_u,
            l_c: mean.losses.l_c,
            total: mean.losses.total,
            val_dice: val.dice,
            val_iou: val.iou,
            val_acc: val.acc,
            lr,
            tau_mean: mean.tau_mean,
            mask_frac: mean.mask_frac,
            entropy_a: mean.entropy_a,
            entropy_b: mean.entropy_b,
        };
        log::info!(
            "epoch {epoch}: total {:.5} val_dice {:.4} lr {:.2e}",
            rec.total,
            rec.val_dice,
            rec.lr
        );
        self.history.push(rec);
        Ok(rec)
    }

    /// Run until `config.epochs`, calling `on_epoch_end` after each epoch with
    /// whether validation Dice improved.
    pub fn train<F>(&mut self, data: &TrainData, mut on_epoch_end: F) -> Result<TrainOutcome>
    where
        F: FnMut(&Self, &EpochRecord, bool) -> Result<()>,
    {
        self.check_static_teacher()?;
        let start = evaluate(&self.student, data.val)?;
        while self.epoch < self.config.epochs {
            let before = self.best.as_ref().map(|(d, _)| *d);
            let rec = self.run_epoch(data)?;
            let improved = before.is_none_or(|d| rec.val_dice > d);
            on_epoch_end(self, &rec, improved)?;
        }
        Ok(TrainOutcome {
            start,
            history: self.history.clone(),
            best_val_dice: self.best.as_ref().map(|(d, _)| *d),
        })
    }

    /// Hash of the configuration with the epoch budget excluded, so a run
    /// can be resumed with a larger budget.
    pub fn resume_hash(config: &TrainConfig) -> Result<String> {
        let mut c = config.clone();
        c.epochs = 0;
        config_hash(&c)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(MODULE_VERSION, Self::resume_hash(&self.config)?, self.epoch);
        let shape = [self.student.params().len()];
        ck.push_array("student", &shape, self.student.params().data());
        ck.push_array("ema_teacher", &shape, self.ema_teacher.params().data());
        ck.push_array("static_teacher", &shape, self.static_teacher.params().data());
        ck.push_array("adam.m", &shape, &self.optimizer.m);
        ck.push_array("adam.v", &shape, &self.optimizer.v);
        if let Some((_, snap)) = &self.best {
            ck.push_array("best", &shape, snap.params().data());
        }
        ck.header.metric_history = self
            .history
            .iter()
            .map(serde_json::to_value)
            .collect::<std::result::Result<_, _>>()?;
        ck.header.extra = json!({
            "adam_step": self.optimizer.step,
            "lr": self.optimizer.lr,
            "scheduler": self.scheduler,
            "best_val_dice": self.best.as_ref().map(|(d, _)| *d),
        });
        Ok(ck)
    }

    /// Rebuild a state saved by [`TrainerState::to_checkpoint`]. `template`
    /// supplies the architecture; its values are overwritten.
    pub fn from_checkpoint(template: N, ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ck.check_config(&Self::resume_hash(&config)?)?;
        let load = |name: &str| -> Result<BackboneHandle<N>> {
            let mut h = BackboneHandle::new(template.clone());
            h.params_mut()?.load(ck.array(name)?)?;
            Ok(h)
        };
        let student = load("student")?;
        let ema_teacher = load("ema_teacher")?;
        let mut static_teacher = load("static_teacher")?;
        static_teacher.freeze();
        let extra = &ck.header.extra;
        let field = |k: &str| {
            extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing header field {k:?}")))
        };
        let mut optimizer = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            student.params().len(),
        );
        optimizer.step = serde_json::from_value(field("adam_step")?)?;
        optimizer.lr = serde_json::from_value(field("lr")?)?;
        optimizer.m = ck.array("adam.m")?.to_vec();
        optimizer.v = ck.array("adam.v")?.to_vec();
        if optimizer.m.len() != student.params().len() || optimizer.v.len() != student.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match network".into()));
        }
        let scheduler: PlateauScheduler = serde_json::from_value(field("scheduler")?)?;
        let best_dice: Option<f64> = serde_json::from_value(field("best_val_dice")?)?;
        let best = match best_dice {
            Some(d) => Some((d, load("best")?.snapshot())),
            None => None,
        };
        let history = ck
            .header
            .metric_history
            .iter()
            .map(|v| serde_json::from_value(v.clone()))
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self {
            static_digest: static_teacher.params().digest(),
            student,
            static_teacher,
            ema_teacher,
            optimizer,
            scheduler,
            epoch: ck.header.epoch,
            history,
            best,
            config,
        })
    }
}

/// Single-network checkpoint holding one `params` array.
pub fn params_checkpoint<N: SegNet>(
    handle: &BackboneHandle<N>,
    config_hash: String,
    epoch: usize,
    extra: serde_json::Value,
) -> Checkpoint {
    let mut ck = Checkpoint::new(MODULE_VERSION, config_hash, epoch);
    ck.push_array("params", &[handle.params().len()], handle.params().data());
    ck.header.extra = extra;
    ck
}

/// Load a [`params_checkpoint`] into a copy of `template`.
pub fn load_params<N: SegNet>(template: N, ck: &Checkpoint) -> Result<BackboneHandle<N>> {
    let mut h = BackboneHandle::new(template);
    h.params_mut()?.load(ck.array("params")?)?;
    Ok(h)
}
