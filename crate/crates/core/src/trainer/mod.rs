//! Static-teacher warm-up, the dual-teacher training step, and evaluation.
//!
//! Losses are per-image means over each batch half. Gradients for the
//! supervised half and the unlabeled half are accumulated separately and only
//! mixed when the corresponding weight is nonzero, so zero weights leave a
//! purely supervised update.

mod state;

pub use state::{load_params, params_checkpoint, EpochRecord, TrainData, TrainOutcome, TrainerState};

use crate::aurcl::{aurcl_forward_backward, AurclConfig};
use crate::backbone::optim::PlateauConfig;
use crate::backbone::{Adam, AdamConfig, BackboneHandle, OutputGrad, SegNet};
use crate::error::{Error, Result};
use crate::losses::{seg_loss_logits, LossBreakdown, LossWeights};
use crate::metrics::{binarize, MetricsAccumulator, MetricsRecord};
use crate::seed::derive_seed;
use crate::types::{ensure_same_shape, BinaryMask, GrayscaleImage, ProbMap};
use crate::uewf::{fuse_detailed, FusionConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Threshold applied to probabilities before computing metrics.
pub const EVAL_THRESHOLD: f64 = 0.5;

/// An image with the mask it is trained or scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: GrayscaleImage,
    pub mask: BinaryMask,
}

impl LabeledSample {
    pub fn new(image: GrayscaleImage, mask: BinaryMask) -> Result<Self> {
        ensure_same_shape(image.shape(), mask.shape())?;
        Ok(Self { image, mask })
    }

    pub fn id(&self) -> &str {
        self.image.id()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("warm-up batch_size must be positive".into()));
        }
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    /// Mean training `seg_loss` per epoch.
    pub epoch_losses: Vec<f64>,
    /// Metrics of the final weights on the training pairs.
    pub train: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Must be even; half labeled, half unlabeled.
    pub batch_size: usize,
    /// Overrides the default of one pass over the larger pool.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub ema_momentum: f64,
    pub weights: LossWeights,
    pub fusion: FusionConfig,
    pub aurcl: AurclConfig,
    pub plateau: PlateauConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            steps_per_epoch: None,
            lr: 1e-3,
            ema_momentum: 0.995,
            weights: LossWeights::default(),
            fusion: FusionConfig::default(),
            aurcl: AurclConfig::default(),
            plateau: PlateauConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("steps_per_epoch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidConfig(format!(
                "ema_momentum must be in [0, 1], got {}",
                self.ema_momentum
            )));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plateau factor must be in (0, 1), got {}",
                self.plateau.factor
            )));
        }
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()?;
        self.weights.validate()?;
        self.fusion.validate()?;
        self.aurcl.validate()
    }
}

/// Indices into the labeled and unlabeled pools for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

fn draw_cycled(pool: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    if pool == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..pool).collect();
    while out.len() < count {
        order.shuffle(rng);
        out.extend(order.iter().take(count - out.len()));
    }
    out
}

/// Batches for one epoch. Each pool is reshuffled per pass and cycled; the
/// shuffle depends only on `(seed, epoch)`.
pub fn plan_epoch(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    steps_per_epoch: Option<usize>,
    seed: u64,
    epoch: usize,
) -> Vec<BatchPlan> {
    let half = (batch_size / 2).max(1);
    let steps = steps_per_epoch.unwrap_or_else(|| n_labeled.max(n_unlabeled).div_ceil(half).max(1));
    let mut rng_l = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("labeled:{epoch}")));
    let mut rng_u = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("unlabeled:{epoch}")));
    let lab = draw_cycled(n_labeled, steps * half, &mut rng_l);
    let unl = draw_cycled(n_unlabeled, steps * half, &mut rng_u);
    (0..steps)
        .map(|s| BatchPlan {
            labeled: lab.get(s * half..(s + 1) * half).unwrap_or_default().to_vec(),
            unlabeled: unl.get(s * half..(s + 1) * half).unwrap_or_default().to_vec(),
        })
        .collect()
}

fn batch_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    ids.into_iter().collect::<Vec<_>>().join(", ")
}

fn finite_logits(logits: &[f64]) -> bool {
    logits.iter().all(|v| v.is_finite())
}

/// Mean `seg_loss` over `batch`; accumulates the gradient of that mean.
pub fn supervised_grad<N: SegNet>(net: &N, batch: &[&LabeledSample], grad: &mut [f64]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let (out, tape) = net.forward_train(&s.image)?;
        ensure_same_shape(s.mask.shape(), (out.height, out.width))?;
        if !finite_logits(&out.logits) {
            return Err(Error::Diverged {
                loss: "supervised",
                ids: batch_ids(batch.iter().map(|s| s.id())),
            });
        }
        let (loss, mut d) = seg_loss_logits(&out.logits, &s.mask.to_prob())?;
        d.iter_mut().for_each(|g| *g /= n);
        net.backward(
            &tape,
            &OutputGrad {
                logits: d,
                features: None,
            },
            grad,
        );
        total += loss;
    }
    let mean = total / n;
    if !mean.is_finite() {
        return Err(Error::Diverged {
            loss: "supervised",
            ids: batch_ids(batch.iter().map(|s| s.id())),
        });
    }
    Ok(mean)
}

/// One optimizer step on the mean supervised loss of `batch`.
pub fn supervised_step<N: SegNet>(
    student: &mut BackboneHandle<N>,
    optimizer: &mut Adam,
    batch: &[&LabeledSample],
) -> Result<f64> {
    let mut grad = vec![0.0; student.params().len()];
    let loss = supervised_grad(student.net(), batch, &mut grad)?;
    optimizer.step(student.params_mut()?.data_mut(), &grad);
    Ok(loss)
}

/// Evaluation of every unlabeled-branch quantity for one image.
pub struct UnlabeledTerms<T> {
    pub l_u: f64,
    pub l_c: f64,
    pub tau: f64,
    pub mask_frac: f64,
    pub entropy_a: f64,
    pub entropy_b: f64,
    pub fused: ProbMap,
    tape: T,
    d_logits_u: Vec<f64>,
    d_logits_c: Vec<f64>,
    d_features_c: Vec<f64>,
}

/// Fuse the two teacher maps, then score the student against the fused
/// target and with the reverse contrastive loss.
pub fn unlabeled_terms<N: SegNet>(
    student: &N,
    image: &GrayscaleImage,
    pa: &ProbMap,
    pb: &ProbMap,
    fusion: &FusionConfig,
    aurcl: &AurclConfig,
) -> Result<UnlabeledTerms<N::Tape>> {
    let fused = fuse_detailed(pa, pb, fusion)?;
    let (out, tape) = student.forward_train(image)?;
    if !finite_logits(&out.logits) {
        return Err(Error::Diverged {
            loss: "unsupervised",
            ids: image.id().to_string(),
        });
    }
    let (l_u, d_logits_u) = seg_loss_logits(&out.logits, &fused.fused)?;
    let p = out.probs()?;
    let term = aurcl_forward_backward(&p, &out.features, aurcl)?;
    let d_logits_c = term
        .d_probs
        .iter()
        .zip(p.values())
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    Ok(UnlabeledTerms {
        l_u,
        l_c: term.loss,
        tau: term.tau,
        mask_frac: term.selected as f64 / p.len() as f64,
        entropy_a: fused.mean_entropy_a,
        entropy_b: fused.mean_entropy_b,
        fused: fused.fused,
        tape,
        d_logits_u,
        d_logits_c,
        d_features_c: term.d_features,
    })
}

/// Losses and diagnostics of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub tau_mean: f64,
    pub mask_frac: f64,
    pub entropy_a: f64,
    pub entropy_b: f64,
}

/// Losses of one step and the gradient of `total` with respect to the
/// student parameters. Nothing is updated.
pub fn step_gradient<N: SegNet>(
    state: &TrainerState<N>,
    labeled: &[&LabeledSample],
    unlabeled: &[&GrayscaleImage],
) -> Result<(StepReport, Vec<f64>)> {
    if !state.static_teacher.is_frozen() {
        return Err(Error::InvalidValue(
            "static teacher must be frozen before the training loop".into(),
        ));
    }
    let cfg = &state.config;
    let w = cfg.weights;
    let mut grad_s = vec![0.0; state.student.params().len()];
    let l_s = supervised_grad(state.student.net(), labeled, &mut grad_s)?;

    let mut grad_u = vec![0.0; grad_s.len()];
    let mut report = StepReport::default();
    let (mut l_u, mut l_c) = (0.0, 0.0);
    let mix = w.lambda_u != 0.0 || w.lambda_c != 0.0;
    let nu = unlabeled.len().max(1) as f64;
    for img in unlabeled {
        let pa = state.static_teacher.predict(img)?;
        let pb = state.ema_teacher.predict(img)?;
        let t = unlabeled_terms(state.student.net(), img, &pa, &pb, &cfg.fusion, &cfg.aurcl)?;
        l_u += t.l_u / nu;
        l_c += t.l_c / nu;
        report.tau_mean += t.tau / nu;
        report.mask_frac += t.mask_frac / nu;
        report.entropy_a += t.entropy_a / nu;
        report.entropy_b += t.entropy_b / nu;
        if mix {
            let logits = t
                .d_logits_u
                .iter()
                .zip(&t.d_logits_c)
                .map(|(u, c)| (w.lambda_u * u + w.lambda_c * c) / nu)
                .collect();
            let features = (w.lambda_c != 0.0).then(|| t.d_features_c.iter().map(|g| w.lambda_c * g / nu).collect());
            state
                .student
                .net()
                .backward(&t.tape, &OutputGrad { logits, features }, &mut grad_u);
        }
    }
    let ids = || batch_ids(labeled.iter().map(|s| s.id()).chain(unlabeled.iter().map(|i| i.id())));
    for (name, v) in [("unsupervised", l_u), ("contrastive", l_c)] {
        if !v.is_finite() {
            return Err(Error::Diverged { loss: name, ids: ids() });
        }
    }
    if mix {
        for (s, u) in grad_s.iter_mut().zip(&grad_u) {
            *s += u;
        }
    }
    if grad_s.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            loss: "gradient",
            ids: ids(),
        });
    }
    report.losses = crate::losses::total_loss(l_s, l_u, l_c, &w);
    Ok((report, grad_s))
}

/// Supervised loss on `labeled`, fused pseudo supervision and reverse
/// contrast on `unlabeled`, one optimizer step, then the EMA update.
pub fn train_step<N: SegNet>(
    state: &mut TrainerState<N>,
    labeled: &[&LabeledSample],
    unlabeled: &[&GrayscaleImage],
) -> Result<StepReport> {
    let (report, grad) = step_gradient(state, labeled, unlabeled)?;
    state.optimizer.step(state.student.params_mut()?.data_mut(), &grad);
    crate::backbone::ema_update(&mut state.ema_teacher, &state.student, state.config.ema_momentum)?;
    Ok(report)
}

/// Mean per-image Dice, IoU and accuracy at [`EVAL_THRESHOLD`].
pub fn evaluate<N: SegNet>(handle: &BackboneHandle<N>, samples: &[LabeledSample]) -> Result<MetricsRecord> {
    let mut acc = MetricsAccumulator::default();
    for s in samples {
        let pred = binarize(&handle.predict(&s.image)?, EVAL_THRESHOLD);
        acc.push(&pred, &s.mask)?;
    }
    Ok(acc.finish())
}

/// Train `net` on pseudo-labeled pairs and return it frozen.
pub fn warmup_static_teacher<N: SegNet>(
    net: N,
    samples: &[LabeledSample],
    cfg: &WarmupConfig,
) -> Result<(BackboneHandle<N>, WarmupReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCache);
    }
    let mut handle = BackboneHandle::new(net);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        handle.params().len(),
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &format!("warmup:{epoch}"),
        )));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|i| &samples[*i]).collect();
            sum += supervised_step(&mut handle, &mut opt, &batch)? * batch.len() as f64;
        }
        let mean = sum / samples.len() as f64;
        log::info!("warm-up epoch {epoch}: seg_loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let train = evaluate(&handle, samples)?;
    handle.freeze();
    Ok((handle, WarmupReport { epoch_losses, train }))
}
