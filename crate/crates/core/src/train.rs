//! Fold training with the one-cycle policy, evaluation and the LR sweep on a
//! real model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{AugmentationPolicy, FoldPlan, ImageSet, Pipeline, PipelineMode, Split, StandardizationStats};
use crate::error::{Error, Result};
use crate::metrics::{confusion, MetricsReport};
use crate::nn::{Mode, Model, ModelSpec, Trainable};
use crate::optim::{lr_range_test, LrFinderConfig, LrFinderResult, Optimizer, OptimizerConfig, Schedule};
use crate::tensor::Tensor;

/// Everything the training loop needs besides data and architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub div_factor: f64,
    pub momentum_range: (f64, f64),
    /// When false the lr stays at `lr_max` and momentum at `optimizer.beta1`.
    pub one_cycle: bool,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub resize: usize,
    pub crop: usize,
    pub augment: AugmentationPolicy,
    /// Train only the classifier head (used after loading a checkpoint).
    pub freeze_body: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_max: 1e-2,
            div_factor: 25.0,
            momentum_range: (0.95, 0.85),
            one_cycle: true,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            resize: 256,
            crop: 224,
            augment: AugmentationPolicy::default(),
            freeze_body: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, total_steps: usize) -> Schedule {
        if self.one_cycle {
            Schedule::OneCycle {
                total_steps,
                lr_max: self.lr_max,
                div_factor: self.div_factor,
                momentum_range: self.momentum_range,
            }
        } else {
            Schedule::Constant {
                lr: self.lr_max,
                momentum: self.optimizer.beta1,
            }
        }
    }

    fn trainable(&self) -> Trainable {
        if self.freeze_body {
            Trainable::HeadOnly
        } else {
            Trainable::All
        }
    }
}

/// Deterministic sub-seed for `(base, purpose, index)` via splitmix64.
pub fn derive_seed(base: u64, purpose: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_ORDER: u64 = 2;
const SEED_AUGMENT: u64 = 3;
const SEED_DROPOUT: u64 = 4;

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    /// Learning rate at the epoch's midpoint step.
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub train_loss: Option<f64>,
    pub train_error_rate: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_error_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum FoldStatus {
    Completed,
    Diverged { epoch: usize, step: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub records: Vec<EpochRecord>,
    pub status: FoldStatus,
    pub model: Model,
    pub stats: StandardizationStats,
    /// Final held-out evaluation, absent without validation samples or
    /// after divergence.
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub probs: Vec<Vec<f64>>,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn error_rate(&self) -> f64 {
        let wrong = self.preds.iter().zip(&self.labels).filter(|(p, l)| p != l).count();
        wrong as f64 / self.labels.len().max(1) as f64
    }

    pub fn report(&self, class_names: &[String]) -> Result<MetricsReport> {
        let cm = confusion(&self.preds, &self.labels, class_names.len())?.with_names(class_names.to_vec())?;
        MetricsReport::from_confusion(cm)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode logits for a prepared `[N,C,H,W]` batch.
pub fn predict_logits(model: &mut Model, batch: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, Trainable::None);
    let x = tape.constant(batch);
    // Eval mode draws no randomness; the rng is only there for the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = model.forward(&mut tape, &binding, x, Mode::Eval, &mut rng)?;
    Ok(tape.value(logits)?.clone())
}

/// Mean loss, probabilities and predictions over `indices` with a
/// validation pipeline.
pub fn evaluate(
    model: &mut Model,
    set: &ImageSet,
    indices: &[usize],
    pipeline: &Pipeline,
    batch_size: usize,
) -> Result<Evaluation> {
    if pipeline.mode() != PipelineMode::Validation {
        return Err(Error::invalid("evaluation requires a validation pipeline"));
    }
    if indices.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    let mut out = Evaluation {
        loss: 0.0,
        probs: Vec::new(),
        preds: Vec::new(),
        labels: Vec::new(),
    };
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = pipeline.batch(set, chunk, 0, 0)?;
        let logits = predict_logits(model, x)?;
        let k = logits.shape()[1];
        let probs = crate::optim::softmax(&logits)?;
        let batch = crate::optim::LossBatch::new(logits.clone(), labels.clone())?;
        total += crate::optim::cross_entropy(&batch)? * labels.len() as f64;
        for (row, lrow) in probs.data().chunks(k).zip(logits.data().chunks(k)) {
            out.preds.push(argmax(lrow));
            out.probs.push(row.to_vec());
        }
        out.labels.extend(labels);
    }
    out.loss = total / indices.len() as f64;
    Ok(out)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Diverged(_))
}

struct StepOutcome {
    loss: f64,
    wrong: usize,
}

/// One forward/backward/update on a prepared batch.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    x: Tensor,
    labels: &[usize],
    trainable: Trainable,
    lr: f64,
    momentum: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, trainable);
    let xv = tape.constant(x);
    let logits = model.forward(&mut tape, &binding, xv, Mode::Train, rng)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss)?.data()[0];
    let k = tape.shape(logits)?[1];
    let wrong = tape
        .value(logits)?
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    tape.backward(loss)?;
    let grads = binding.gradients(&tape)?;
    opt.step(model.params_mut(), &grads, lr, momentum)?;
    Ok(StepOutcome { loss: value, wrong })
}

/// Trains one fold from `init` (or a fresh seeded model) on `train_idx`,
/// evaluating on `val_idx` before training and after every epoch.
///
/// Training batches drop the incomplete tail so batch norm always sees more
/// than one sample. A non-finite loss stops the fold and is reported in the
/// returned status rather than as an error.
pub fn train_fold(
    spec: &ModelSpec,
    init: Option<&Model>,
    set: &ImageSet,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<FoldResult> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let steps_per_epoch = train_idx.len() / cfg.batch_size;
    if steps_per_epoch == 0 || cfg.epochs == 0 {
        return Err(Error::Config(format!(
            "{} training samples with batch size {} and {} epochs gives no steps",
            train_idx.len(),
            cfg.batch_size,
            cfg.epochs
        )));
    }
    let stats = set.stats(train_idx, Split::Train)?;
    let train_pipe = Pipeline::new(PipelineMode::Train, cfg.resize, cfg.crop, cfg.augment.clone(), stats.clone())?;
    let val_pipe = Pipeline::validation(cfg.resize, cfg.crop, stats.clone())?;
    let mut model = match init {
        Some(m) => {
            if m.spec() != spec {
                return Err(Error::Model("initial weights do not match the requested architecture".into()));
            }
            m.clone()
        }
        None => Model::new(spec.clone(), derive_seed(cfg.seed, SEED_INIT, fold as u64))?,
    };
    let mut opt = Optimizer::new(cfg.optimizer, model.params())?;
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = cfg.schedule(total_steps);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_DROPOUT, fold as u64));
    let augment_seed = derive_seed(cfg.seed, SEED_AUGMENT, fold as u64);
    let eval = |model: &mut Model| -> Result<Option<Evaluation>> {
        if val_idx.is_empty() {
            return Ok(None);
        }
        evaluate(model, set, val_idx, &val_pipe, cfg.batch_size).map(Some)
    };

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut last_eval = eval(&mut model)?;
    records.push(EpochRecord {
        fold,
        epoch: 0,
        lr: None,
        momentum: None,
        train_loss: None,
        train_error_rate: None,
        val_loss: last_eval.as_ref().map(|e| e.loss),
        val_error_rate: last_eval.as_ref().map(Evaluation::error_rate),
    });
    let mut status = FoldStatus::Completed;
    let mut order = train_idx.to_vec();
    'epochs: for epoch in 1..=cfg.epochs {
        order.copy_from_slice(train_idx);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SEED_ORDER,
            ((fold as u64) << 32) | epoch as u64,
        )));
        let (mut loss_sum, mut wrong, mut seen) = (0.0, 0, 0);
        for (b, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let step = (epoch - 1) * steps_per_epoch + b;
            let (lr, momentum) = schedule.at(step)?;
            let (x, labels) = train_pipe.batch(set, chunk, augment_seed, epoch as u64)?;
            match train_step(&mut model, &mut opt, x, &labels, cfg.trainable(), lr, momentum, &mut dropout_rng) {
                Ok(out) => {
                    loss_sum += out.loss * labels.len() as f64;
                    wrong += out.wrong;
                    seen += labels.len();
                }
                Err(e) if is_divergence(&e) => {
                    status = FoldStatus::Diverged {
                        epoch,
                        step,
                        reason: format!("{e} (lr {lr:.3e})"),
                    };
                    last_eval = None;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (lr, momentum) = schedule.at((epoch - 1) * steps_per_epoch + steps_per_epoch / 2)?;
        last_eval = match eval(&mut model) {
            Ok(e) => e,
            Err(e) if is_divergence(&e) => {
                status = FoldStatus::Diverged {
                    epoch,
                    step: epoch * steps_per_epoch,
                    reason: format!("validation: {e}"),
                };
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        records.push(EpochRecord {
            fold,
            epoch,
            lr: Some(lr),
            momentum: Some(momentum),
            train_loss: Some(loss_sum / seen as f64),
            train_error_rate: Some(wrong as f64 / seen as f64),
            val_loss: last_eval.as_ref().map(|e| e.loss),
            val_error_rate: last_eval.as_ref().map(Evaluation::error_rate),
        });
    }
    let report = match (&status, last_eval) {
        (FoldStatus::Completed, Some(e)) => Some(e.report(&set.class_names)?),
        _ => None,
    };
    Ok(FoldResult {
        fold,
        records,
        status,
        model,
        stats,
        report,
    })
}

/// Cross-validated training: for every fold in `folds`, train on the others
/// and validate on it.
pub fn fit_one_cycle(
    spec: &ModelSpec,
    init: Option<&Model>,
    set: &ImageSet,
    plan: &FoldPlan,
    folds: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<FoldResult>> {
    plan.validate()?;
    if plan.len() != set.len() {
        return Err(Error::Dataset(format!(
            "fold plan covers {} samples, dataset has {}",
            plan.len(),
            set.len()
        )));
    }
    folds
        .iter()
        .map(|&f| {
            if f >= plan.k {
                return Err(Error::Config(format!("fold {f} out of range for k={}", plan.k)));
            }
            train_fold(spec, init, set, &plan.train_indices(f), &plan.validation_indices(f), cfg, f)
        })
        .collect()
}

/// JSON-lines log: a header object, then one record per epoch.
pub fn render_log(header: &serde_json::Value, records: &[EpochRecord]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// LR range test on a fresh model over `indices`, cycling through shuffled
/// training batches.
pub fn find_lr(
    spec: &ModelSpec,
    set: &ImageSet,
    indices: &[usize],
    cfg: &TrainConfig,
    finder: &LrFinderConfig,
) -> Result<LrFinderResult> {
    if indices.len() < cfg.batch_size || cfg.batch_size < 2 {
        return Err(Error::Config(format!(
            "need at least one batch of {} (>= 2) samples, have {}",
            cfg.batch_size,
            indices.len()
        )));
    }
    let stats = set.stats(indices, Split::Train)?;
    let pipe = Pipeline::new(PipelineMode::Train, cfg.resize, cfg.crop, cfg.augment.clone(), stats)?;
    let mut model = Model::new(spec.clone(), derive_seed(cfg.seed, SEED_INIT, u64::MAX))?;
    let mut opt = Optimizer::new(cfg.optimizer, model.params())?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_DROPOUT, u64::MAX));
    let augment_seed = derive_seed(cfg.seed, SEED_AUGMENT, u64::MAX);
    let mut order = indices.to_vec();
    let mut pass = 0u64;
    let mut cursor = usize::MAX;
    let trainable = cfg.trainable();
    let momentum = cfg.optimizer.beta1;
    lr_range_test(finder, |lr| {
        if cursor == usize::MAX || cursor + cfg.batch_size > order.len() {
            order.copy_from_slice(indices);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_ORDER, pass)));
            pass += 1;
            cursor = 0;
        }
        let chunk = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let (x, labels) = pipe.batch(set, chunk, augment_seed, pass)?;
        train_step(&mut model, &mut opt, x, &labels, trainable, lr, momentum, &mut dropout_rng).map(|o| o.loss)
    })
}
