//! Optimizer, schedules and the two-phase fine-tuning protocol.

mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::data::{augment, stack_images, AugmentConfig, LoadedSplit};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{save_checkpoint, CheckpointMeta, Model, Precision};
use crate::tensor::Tensor;

pub use optim::{adam_step, AdamConfig, AdamState, EarlyStopState, PlateauState};

pub const DEFAULT_SEEDS: [u64; 3] = [42, 7, 123];
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub phase: u8,
    pub epochs: usize,
    pub lr: f64,
    pub unfreeze_last_n: usize,
}

impl PhaseConfig {
    /// Head and attention only: 15 epochs at 1e-3.
    pub fn phase1() -> Self {
        PhaseConfig { phase: 1, epochs: 15, lr: 1e-3, unfreeze_last_n: 0 }
    }

    /// Fine-tuning: 20 epochs at 1e-5 with the last layers unfrozen; 30 for
    /// `densenet121`, half the backbone layers for any other preset.
    pub fn phase2(model: &Model) -> Self {
        let n = if model.config().preset == "densenet121" { 30 } else { model.backbone_layer_count() / 2 };
        PhaseConfig { phase: 2, epochs: 20, lr: 1e-5, unfreeze_last_n: n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phases: Vec<PhaseConfig>,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub min_delta: f64,
    /// Number of training images whose statistics seed the backbone
    /// batch-norm running averages before Phase 1; 0 disables.
    pub calibration_images: usize,
}

impl TrainConfig {
    pub fn for_model(model: &Model) -> Self {
        TrainConfig {
            phases: vec![PhaseConfig::phase1(), PhaseConfig::phase2(model)],
            batch_size: DEFAULT_BATCH_SIZE,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            early_stop_patience: 5,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_lr: 1e-7,
            min_delta: 1e-4,
            calibration_images: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch size {} below 2", self.batch_size)));
        }
        if self.phases.iter().any(|p| !(p.lr >= 0.0 && p.lr.is_finite())) {
            return Err(Error::InvalidArgument("learning rates must be finite and ≥ 0".into()));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: u8,
    /// 1-based within the phase.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    EarlyStop,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Budget => "budget",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stops: Vec<(u8, StopReason)>,
    /// Index into `epochs` of the retained checkpoint.
    pub best_index: Option<usize>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_index.map(|i| &self.epochs[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,train_loss,train_acc,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.phase, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.lr
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(probs: &Tensor, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs.data().chunks_exact(k).zip(labels).filter(|(r, &y)| argmax(r) == y).count()
}

/// Where in the protocol a step runs, for fault reports.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub phase: u8,
    pub epoch: usize,
}

/// One pass over `data` in seeded random order. Batches hold
/// `batch_size` items; a final partial batch is kept when it has at least
/// two items. Each batch is augmented, run in train mode, and every
/// trainable parameter takes one Adam step.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    data: &LoadedSplit,
    class_weights: &[f64],
    adam: &mut AdamState,
    lr: f64,
    batch_size: usize,
    augment_config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    ctx: StepContext,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} below 2")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let fault = |detail: String| Error::TrainingFault { phase: ctx.phase, epoch: ctx.epoch, batch: b + 1, detail };
        let images: Vec<Tensor> = chunk.iter().map(|&i| augment(&data.images[i], augment_config, rng)).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let x = stack_images(&images)?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let out = model.forward_graph(&mut g, xi, Mode::Train, None, rng)?;
        let loss = g.weighted_cross_entropy(out.probabilities, &labels, class_weights)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(fault(format!("loss is {lv}")));
        }
        let grads = g.backward(loss)?;
        let mut updates = Vec::with_capacity(out.trainable.len());
        for (name, v) in &out.trainable {
            if let Some(t) = grads.get(*v) {
                if !t.all_finite() {
                    return Err(fault(format!("non-finite gradient for `{name}`")));
                }
                updates.push((name.clone(), t.clone()));
            }
        }
        hits += correct(g.value(out.probabilities), &labels);
        loss_sum += lv * chunk.len() as f64;
        seen += chunk.len();
        drop(grads);
        adam_step(model.params_mut(), &updates, adam, lr)?;
        model.apply_bn_updates(out.bn_updates);
        if model.params().iter().any(|p| !p.frozen && !p.value.all_finite()) {
            return Err(fault("parameters became non-finite after the update".into()));
        }
    }
    if seen == 0 {
        return Err(Error::Data("no batch of at least two training samples".into()));
    }
    Ok(EpochStats { loss: loss_sum / seen as f64, accuracy: hits as f64 / seen as f64 })
}

/// Infer-mode loss, accuracy and probabilities over a whole split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub probabilities: Tensor,
}

/// Evaluates in chunks of `batch_size`. `class_weights = None` gives the
/// plain mean cross-entropy.
pub fn evaluate(model: &Model, data: &LoadedSplit, class_weights: Option<&[f64]>, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let k = model.config().head.classes;
    let ones = vec![1.0; k];
    let weights = class_weights.unwrap_or(&ones);
    let mut probs = Vec::with_capacity(data.len() * k);
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let p = model.predict(&x)?;
        let mut g = Graph::new();
        let pv = g.input(p.clone());
        let l = g.weighted_cross_entropy(pv, &labels, weights)?;
        loss += g.value(l).data()[0] * chunk.len() as f64;
        probs.extend_from_slice(p.data());
    }
    let probabilities = Tensor::new([data.len(), k], probs)?;
    let accuracy = correct(&probabilities, &data.labels) as f64 / data.len() as f64;
    Ok(Evaluation { loss: loss / data.len() as f64, accuracy, probabilities })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The model as it was after its best validation epoch.
    pub best: Model,
    pub best_meta: CheckpointMeta,
    /// The model after the last epoch.
    pub last: Model,
    /// The model as each phase left it, in phase order.
    pub phase_end: Vec<Model>,
    pub history: TrainHistory,
}

/// Phase 1 then Phase 2 with fresh optimizer and scheduler state each.
///
/// Early stopping and the plateau schedule watch validation loss; after any
/// epoch whose validation accuracy strictly beats every earlier one the
/// model is retained (and written to `checkpoint` when given).
pub fn run_two_phase(
    mut model: Model,
    train: &LoadedSplit,
    val: &LoadedSplit,
    class_weights: &[f64],
    config: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    if config.calibration_images > 0 {
        // Splits are grouped by class, so the calibration batch is sampled.
        let mut pick = ChaCha8Rng::seed_from_u64(seed);
        pick.set_stream(2);
        let n = config.calibration_images.min(train.len());
        let chosen: Vec<Tensor> =
            rand::seq::index::sample(&mut pick, train.len(), n).into_iter().map(|i| train.images[i].clone()).collect();
        model.calibrate_batch_norm(&stack_images(&chosen)?)?;
    }
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model, CheckpointMeta)> = None;
    let mut phase_end = Vec::with_capacity(config.phases.len());
    for phase in &config.phases {
        model.set_trainable(phase.unfreeze_last_n)?;
        let mut adam = AdamState::new(config.adam);
        let mut stopper = EarlyStopState::new(config.early_stop_patience, config.min_delta);
        let mut plateau = PlateauState {
            factor: config.plateau_factor,
            patience: config.plateau_patience,
            min_lr: config.min_lr,
            min_delta: config.min_delta,
            ..PlateauState::new(phase.lr)
        };
        let mut reason = StopReason::Budget;
        for epoch in 1..=phase.epochs {
            let lr = plateau.lr;
            let ctx = StepContext { phase: phase.phase, epoch };
            let stats = train_epoch(
                &mut model,
                train,
                class_weights,
                &mut adam,
                lr,
                config.batch_size,
                &config.augment,
                &mut rng,
                ctx,
            )?;
            let eval = evaluate(&model, val, None, config.batch_size)?;
            if !eval.loss.is_finite() {
                return Err(Error::TrainingFault {
                    phase: phase.phase,
                    epoch,
                    batch: 0,
                    detail: format!("validation loss is {}", eval.loss),
                });
            }
            history.epochs.push(EpochRecord {
                phase: phase.phase,
                epoch,
                train_loss: stats.loss,
                train_accuracy: stats.accuracy,
                val_loss: eval.loss,
                val_accuracy: eval.accuracy,
                lr,
            });
            if best.as_ref().is_none_or(|(acc, _, _)| eval.accuracy > *acc) {
                let meta = CheckpointMeta { seed, phase: phase.phase, epoch, val_accuracy: eval.accuracy };
                if let Some(path) = checkpoint {
                    save_checkpoint(&model, &meta, path, Precision::F64)?;
                }
                history.best_index = Some(history.epochs.len() - 1);
                best = Some((eval.accuracy, model.clone(), meta));
            }
            plateau.update(eval.loss);
            if stopper.update(eval.loss) {
                reason = StopReason::EarlyStop;
                break;
            }
        }
        history.stops.push((phase.phase, reason));
        phase_end.push(model.clone());
    }
    let (_, best_model, best_meta) = best.ok_or_else(|| Error::InvalidArgument("no epochs were run".into()))?;
    Ok(TrainOutcome { best: best_model, best_meta, last: model, phase_end, history })
}

/// Runs `run` once per seed in order; the first failure aborts with the
/// seed attached.
pub fn run_multi_seed<T>(seeds: &[u64], mut run: impl FnMut(u64) -> Result<T>) -> Result<Vec<T>> {
    seeds
        .iter()
        .map(|&seed| run(seed).map_err(|e| Error::SeedRun { seed, source: Box::new(e) }))
        .collect()
}

#[cfg(test)]
mod tests;
