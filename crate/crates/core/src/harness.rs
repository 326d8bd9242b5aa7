//! Training loop, plateau schedule, Dice evaluation and cross-validation.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{write_csv, FoldPlan, Sample};
use crate::error::{contract, Error, Result};
use crate::loss::{segmentation_loss, LossKind};
use crate::mhex::deep_supervision_loss;
use crate::models::{predict_from_logits, ForwardOptions, ModelConfig, ModelGraph};
use crate::par::{try_map_indexed, Exec};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_patience: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    /// Weight of the summed deep-supervision terms; `None` means `1/L`.
    pub aux_weight: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            early_stop_patience: 10,
            lr_reduce_patience: 5,
            lr: 1e-3,
            lr_factor: 0.5,
            batch_size: 4,
            loss_kind: LossKind::CrossEntropy,
            aux_weight: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig";
        if self.max_epochs == 0 || self.batch_size == 0 {
            return contract(OP, "max_epochs and batch_size must be >= 1");
        }
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return contract(OP, "patience values must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return contract(OP, "lr must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return contract(OP, "lr_factor must lie in (0, 1)");
        }
        if self.aux_weight.is_some_and(|w| !(w >= 0.0 && w.is_finite())) {
            return contract(OP, "aux_weight must be finite and >= 0");
        }
        Ok(())
    }
}

/// Minimum decrease in validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// Reduce-on-plateau learning rate with early stopping, driven by one
/// validation loss per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    base_lr: f64,
    factor: f64,
    reduce_patience: usize,
    stop_patience: usize,
    best: f64,
    since_best: usize,
    since_reduce: usize,
    reductions: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            base_lr: cfg.lr,
            factor: cfg.lr_factor,
            reduce_patience: cfg.lr_reduce_patience,
            stop_patience: cfg.early_stop_patience,
            best: f64::INFINITY,
            since_best: 0,
            since_reduce: 0,
            reductions: 0,
        }
    }

    /// `base_lr · factor^m` after `m` reductions.
    pub fn lr(&self) -> f64 {
        self.base_lr * self.factor.powi(self.reductions)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleStep {
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.since_best = 0;
            self.since_reduce = 0;
            return ScheduleStep {
                improved: true,
                reduced: false,
                stop: false,
            };
        }
        self.since_best += 1;
        self.since_reduce += 1;
        let reduced = self.since_reduce >= self.reduce_patience;
        if reduced {
            self.reductions += 1;
            self.since_reduce = 0;
        }
        ScheduleStep {
            improved: false,
            reduced,
            stop: self.since_best >= self.stop_patience,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &ModelGraph) -> Self {
        let mut m = Vec::new();
        model.visit_params(|_, t| m.push(Tensor::zeros(t.dims())));
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update; `grads` follows [`ModelGraph::visit_params`] order.
    pub fn step(&mut self, model: &mut ModelGraph, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return contract(
                "Adam::step",
                format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            );
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut i = 0;
        model.visit_params_mut(|_, p| {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_dice,lr";

    pub fn csv_rows(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| format!("{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_dice, e.lr))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for row in self.csv_rows() {
            let _ = writeln!(s, "{row}");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path, Self::CSV_HEADER, self.csv_rows())
    }
}

/// `2|P∩T| / (|P|+|T|)` for class `c`; 1 when both masks lack the class.
pub fn dice_score(pred: &[usize], truth: &[usize], class: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return contract("dice_score", format!("mask sizes {} vs {}", pred.len(), truth.len()));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        p += usize::from(a == class);
        t += usize::from(b == class);
        both += usize::from(a == class && b == class);
    }
    Ok(if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    })
}

/// Mean Dice over the non-background classes `1..k`.
pub fn foreground_dice(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 1..k {
        total += dice_score(pred, truth, c)?;
    }
    Ok(total / (k - 1).max(1) as f64)
}

/// Stacks samples into `[B, 1, H, W]` images and flat `[B, H, W]` targets.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let Some(first) = samples.first() else {
        return contract("stack_batch", "empty batch");
    };
    let (h, w) = (first.height(), first.width());
    let mut image = Vec::with_capacity(samples.len() * h * w);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return contract("stack_batch", "samples differ in size");
        }
        image.extend_from_slice(s.image.data());
        target.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(vec![samples.len(), 1, h, w], image)?, target))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean per-sample loss of the final output.
    pub loss: f64,
    /// Mean per-sample foreground Dice.
    pub dice: f64,
}

/// Scores the final output of `model` on `samples`, `batch` images at a time.
pub fn evaluate(model: &ModelGraph, samples: &[Sample], kind: LossKind, batch: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return contract("evaluate", "no samples");
    }
    let k = model.config().class_count;
    let (mut loss, mut dice) = (0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (image, target) = stack_batch(&refs)?;
        let tape = Tape::new();
        let x = tape.constant(image);
        let logits = model.forward(&tape, x, ForwardOptions::default())?.final_logits.value();
        // per-item losses so the mean does not depend on the batch size
        let [_, _, h, w] = logits.dims4("evaluate")?;
        let item_len = k * h * w;
        for (i, pred) in predict_from_logits(&logits)?.iter().enumerate() {
            let item = Tensor::new(
                vec![1, k, h, w],
                logits.data()[i * item_len..(i + 1) * item_len].to_vec(),
            )?;
            let t = &target[i * h * w..(i + 1) * h * w];
            let scratch = Tape::new();
            loss += segmentation_loss(scratch.constant(item), t, kind)?.value().data()[0];
            dice += foreground_dice(&pred.mask, t, k)?;
        }
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        dice: dice / n,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains a copy of `model` and returns the weights from the epoch with the
/// lowest validation loss.
pub fn train(
    model: &ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return contract("train", "train and validation splits must be non-empty");
    }
    let mut model = model.clone();
    let mut best = model.clone();
    let mut adam = Adam::new(&model);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = loss_and_grads(&model, &batch, cfg).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("training loss {loss}"),
                });
            }
            train_loss += loss * batch.len() as f64;
            adam.step(&mut model, &grads, lr)?;
        }
        train_loss /= train_set.len() as f64;
        let eval = evaluate(&model, val_set, cfg.loss_kind, cfg.batch_size).map_err(|e| diverged(epoch, e))?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("validation loss {}", eval.loss),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: eval.loss,
            val_dice: eval.dice,
            lr,
        });
        history.stop_epoch = epoch;
        let step = schedule.observe(eval.loss);
        if step.improved {
            best = model.clone();
            history.best_epoch = epoch;
        }
        if step.stop {
            break;
        }
    }
    Ok((best, history))
}

/// Training objective and parameter gradients for one batch.
fn loss_and_grads(model: &ModelGraph, batch: &[&Sample], cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    let (image, target) = stack_batch(batch)?;
    let tape = Tape::new();
    let x = tape.constant(image);
    let opts = ForwardOptions {
        params_require_grad: true,
        ..ForwardOptions::default()
    };
    let trace = model.forward(&tape, x, opts)?;
    let loss = if trace.deep_preds.is_empty() {
        segmentation_loss(trace.final_logits, &target, cfg.loss_kind)?
    } else {
        deep_supervision_loss(
            &trace.deep_preds,
            &target,
            trace.final_logits,
            cfg.loss_kind,
            cfg.aux_weight,
        )?
    };
    let value = loss.value().data()[0];
    let mut grads = tape.backward(loss)?;
    let grads = trace
        .params
        .iter()
        .map(|p| grads.take(p.id()).unwrap_or_else(|| Tensor::zeros(p.value().dims())))
        .collect();
    Ok((value, grads))
}

/// Held-out Dice per fold with the mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub fold_dice: Vec<f64>,
    pub histories: Vec<TrainHistory>,
}

impl CvReport {
    pub fn mean(&self) -> f64 {
        self.fold_dice.iter().sum::<f64>() / self.fold_dice.len() as f64
    }

    pub fn std(&self) -> f64 {
        sample_std(&self.fold_dice)
    }
}

/// Percentages as `mean ± std` with two decimals.
impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean(), 100.0 * self.std())
    }
}

/// Standard deviation with the `n − 1` denominator; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Fold `f` is the test split and fold `f+1 mod k` the validation split;
/// the remaining folds train. Folds run through `exec`.
pub fn cross_validate(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &[Sample],
    plan: &FoldPlan,
    exec: Exec,
) -> Result<CvReport> {
    if plan.k < 3 {
        return contract("cross_validate", "need k >= 3 for separate validation and test folds");
    }
    let by_id = |ids: Vec<usize>| -> Result<Vec<Sample>> {
        ids.into_iter()
            .map(|id| match dataset.iter().find(|s| s.id == id) {
                Some(s) => Ok(s.clone()),
                None => contract("cross_validate", format!("plan references missing sample {id}")),
            })
            .collect()
    };
    if plan.assignments.len() != dataset.len() {
        return contract("cross_validate", "plan does not cover the dataset");
    }
    let model = ModelGraph::build(model_cfg)?;
    let runs = try_map_indexed(exec, plan.k, |f| {
        let val_fold = (f + 1) % plan.k;
        let test = by_id(plan.fold_ids(f))?;
        let val = by_id(plan.fold_ids(val_fold))?;
        let train_ids = plan
            .assignments
            .iter()
            .filter(|a| a.1 != f && a.1 != val_fold)
            .map(|a| a.0)
            .collect();
        let (best, history) = train(&model, &by_id(train_ids)?, &val, train_cfg)?;
        let dice = evaluate(&best, &test, train_cfg.loss_kind, train_cfg.batch_size)?.dice;
        Ok::<_, Error>((dice, history))
    })?;
    let (fold_dice, histories) = runs.into_iter().unzip();
    Ok(CvReport { fold_dice, histories })
}
