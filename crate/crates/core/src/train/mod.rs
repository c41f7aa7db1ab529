//! Training with ADAM over per-choice probabilities, argmax evaluation,
//! metric history and checkpoints.

mod checkpoint;
mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelArch, ModelError, PanelBatch, VarModel};
use crate::nn::Session;
use crate::rpm::{Configuration, RpmItem};
use crate::tensor::{Adam, AdamConfig, Float, Mode, RunningStats, Tensor, TensorError, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta,
};
pub use metrics::{EpochRecord, Metrics, Phase};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("item {item} has panel size {got}, model expects {expected}")]
    PanelSize { item: usize, expected: usize, got: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        history: Box<Metrics>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Items per ADAM step; each item contributes 8 completed matrices.
    pub batch_items: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pos_weight: f64,
    /// Epochs without a validation-accuracy gain before stopping; 0 never
    /// stops early.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_items: 16,
            epochs: 50,
            seed: 0,
            pos_weight: 7.0,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_items == 0 {
            return bad("batch_items must be at least 1".into());
        }
        if !(self.pos_weight > 0.0) {
            return bad(format!("pos_weight must be positive, got {}", self.pos_weight));
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("ADAM hyperparameters out of range".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn check_sizes(items: &[&RpmItem], panel_size: usize) -> Result<()> {
    for (i, it) in items.iter().enumerate() {
        if it.panel_size != panel_size || it.panels.iter().any(|p| p.len() != panel_size * panel_size) {
            return Err(TrainError::PanelSize {
                item: i,
                expected: panel_size,
                got: it.panel_size,
            });
        }
    }
    Ok(())
}

/// Targets for a batch: 1 at each item's correct choice, 0 elsewhere.
fn targets<T: Float>(items: &[&RpmItem]) -> Vec<T> {
    items
        .iter()
        .flat_map(|it| (0..8).map(move |k| if k == it.correct as usize { T::one() } else { T::zero() }))
        .collect()
}

/// Builds the graph for the mean item loss over `items`: probabilities of
/// shape `(8 * items, 1)` and the weighted binary cross-entropy. Every
/// choice is scored in its own completed matrix.
pub fn batch_loss<T: Float>(
    arch: &ModelArch<T>,
    s: &mut Session<T>,
    items: &[&RpmItem],
    pos_weight: f64,
) -> Result<(Var, Var)> {
    let panel_size = arch.panel_size();
    check_sizes(items, panel_size)?;
    let batch = PanelBatch::<T>::from_items(panel_size, items.iter().map(|it| it.panels.as_slice()))?;
    let p = arch.forward(s, &batch, None)?;
    let loss = s.graph.bce_loss(p, &targets::<T>(items), pos_weight)?;
    Ok((p, loss))
}

/// Loss and the eight choice probabilities of one item.
pub fn loss_for_item<T: Float>(
    model: &mut VarModel<T>,
    item: &RpmItem,
    mode: Mode,
    pos_weight: f64,
) -> Result<(f64, [T; 8])> {
    let (arch, mut s) = model.session(mode, false);
    let (p, loss) = batch_loss(arch, &mut s, &[item], pos_weight)?;
    let probs: [T; 8] = s.graph.value(p).data().try_into().expect("eight probabilities");
    Ok((s.graph.value(loss).data()[0].as_f64(), probs))
}

/// Index of the largest probability, lowest index on ties, plus whether a
/// tie occurred.
pub fn argmax<T: Float>(probs: &[T]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
            tie = false;
        } else if p == probs[best] {
            tie = true;
        }
    }
    (best, tie)
}

/// Outcome of scoring a set of items in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    /// `(configuration, correct, total)` in configuration order.
    pub per_config: Vec<(Configuration, usize, usize)>,
    pub responses: Vec<usize>,
    pub ties: usize,
}

impl EvalReport {
    fn from_scores(items: &[&RpmItem], probs: &[Vec<f64>], loss_sum: f64) -> Self {
        let mut per_config: Vec<(Configuration, usize, usize)> = Vec::new();
        let mut responses = Vec::with_capacity(items.len());
        let (mut hits, mut ties) = (0, 0);
        for (it, p) in items.iter().zip(probs) {
            let (r, tie) = argmax(p);
            if tie {
                ties += 1;
            }
            let ok = r == it.correct as usize;
            hits += ok as usize;
            responses.push(r);
            match per_config.iter_mut().find(|(c, _, _)| *c == it.config) {
                Some(e) => {
                    e.1 += ok as usize;
                    e.2 += 1;
                }
                None => per_config.push((it.config, ok as usize, 1)),
            }
        }
        if ties > 0 {
            log::info!(
                "{ties} of {} items had tied top probabilities; lowest index chosen",
                items.len()
            );
        }
        per_config.sort_by_key(|(c, _, _)| c.id());
        let n = items.len().max(1) as f64;
        Self {
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            per_config,
            responses,
            ties,
        }
    }

    pub fn config_accuracy(&self) -> Vec<(Configuration, f64)> {
        self.per_config
            .iter()
            .map(|&(c, ok, n)| (c, ok as f64 / n as f64))
            .collect()
    }
}

/// Eval-mode scoring of every item in chunks of `chunk` items.
pub fn evaluate<T: Float>(
    model: &mut VarModel<T>,
    items: &[&RpmItem],
    chunk: usize,
    pos_weight: f64,
) -> Result<EvalReport> {
    let mut probs = Vec::with_capacity(items.len());
    let mut loss_sum = 0.0;
    for part in items.chunks(chunk.max(1)) {
        let (arch, mut s) = model.session(Mode::Eval, false);
        let (p, loss) = batch_loss(arch, &mut s, part, pos_weight)?;
        loss_sum += s.graph.value(loss).data()[0].as_f64() * part.len() as f64;
        probs.extend(
            s.graph
                .value(p)
                .data()
                .chunks(8)
                .map(|c| c.iter().map(|v| v.as_f64()).collect()),
        );
    }
    Ok(EvalReport::from_scores(items, &probs, loss_sum))
}

/// Parameter and running-statistic values at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub params: Vec<Tensor<T>>,
    pub stats: Vec<RunningStats<T>>,
}

impl<T: Float> Snapshot<T> {
    pub fn take(model: &VarModel<T>) -> Self {
        Self {
            params: model.params().values().to_vec(),
            stats: model.buffers().stats().to_vec(),
        }
    }

    pub fn restore(&self, model: &mut VarModel<T>) {
        model.params_mut().values_mut().clone_from_slice(&self.params);
        model.buffers_mut().stats_mut().clone_from_slice(&self.stats);
    }
}

/// Result of a training run. The model is left holding the best weights.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Metrics,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// ADAM steps taken when the best weights were recorded.
    pub best_adam_steps: u64,
}

/// Epoch 0 evaluates the untrained model on validation data. Each later
/// epoch shuffles the training items with a stream keyed by `(seed,
/// epoch)`, takes one ADAM step per batch, then evaluates on validation
/// data. The model keeps the weights of the best validation accuracy,
/// earliest epoch on ties.
///
/// On a non-finite loss the best weights are restored and the history so
/// far is returned inside the error.
pub fn train(
    model: &mut VarModel<f32>,
    train: &[&RpmItem],
    val: &[&RpmItem],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if train.is_empty() && config.epochs > 0 {
        return Err(TrainError::EmptySplit("training"));
    }
    let panel_size = model.config().panel_size;
    check_sizes(train, panel_size)?;
    check_sizes(val, panel_size)?;

    let mut history = Metrics::default();
    let mut adam = Adam::<f32>::new(config.adam(), model.params().values().iter().map(|t| t.shape()));
    let started = Instant::now();
    let report = evaluate(model, val, config.batch_items, config.pos_weight)?;
    history.push(EpochRecord::from_report(
        0,
        Phase::Val,
        &report,
        started.elapsed().as_secs_f64(),
    ));
    let mut best = (0, report.accuracy, Snapshot::take(model), 0u64);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut per_config: Vec<(Configuration, usize, usize)> = Vec::new();
        for (b, idx) in order.chunks(config.batch_items).enumerate() {
            let batch: Vec<&RpmItem> = idx.iter().map(|&i| train[i]).collect();
            let (arch, mut s) = model.session(Mode::Train, true);
            let (p, loss) = batch_loss(arch, &mut s, &batch, config.pos_weight)?;
            let loss_value = s.graph.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                drop(s);
                best.2.restore(model);
                log::error!(
                    "non-finite loss at epoch {epoch}, batch {b}; keeping epoch {} weights",
                    best.0
                );
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    history: Box::new(history),
                });
            }
            let mut grads = s.graph.backward(loss)?;
            let grads = s.param_grads(&mut grads);
            for (it, probs) in batch.iter().zip(s.graph.value(p).data().chunks(8)) {
                let ok = argmax(probs).0 == it.correct as usize;
                hits += ok as usize;
                match per_config.iter_mut().find(|(c, _, _)| *c == it.config) {
                    Some(e) => {
                        e.1 += ok as usize;
                        e.2 += 1;
                    }
                    None => per_config.push((it.config, ok as usize, 1)),
                }
            }
            drop(s);
            loss_sum += loss_value * batch.len() as f64;
            adam.step(model.params_mut().values_mut(), &grads)?;
        }
        per_config.sort_by_key(|(c, _, _)| c.id());
        let n = train.len() as f64;
        let seconds = started.elapsed().as_secs_f64();
        history.push(EpochRecord {
            epoch,
            phase: Phase::Train,
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            per_config: per_config.iter().map(|&(c, ok, t)| (c, ok as f64 / t as f64)).collect(),
            seconds,
        });

        let started = Instant::now();
        let report = evaluate(model, val, config.batch_items, config.pos_weight)?;
        history.push(EpochRecord::from_report(
            epoch,
            Phase::Val,
            &report,
            started.elapsed().as_secs_f64(),
        ));
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3} ({:.1}s)",
            loss_sum / n,
            hits as f64 / n,
            report.loss,
            report.accuracy,
            seconds
        );
        if report.accuracy > best.1 {
            best = (epoch, report.accuracy, Snapshot::take(model), adam.state.t);
        } else if config.patience > 0 && epoch - best.0 >= config.patience {
            log::info!("no validation gain for {} epochs; stopping", config.patience);
            break;
        }
    }
    best.2.restore(model);
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
        best_val_accuracy: best.1,
        best_adam_steps: best.3,
    })
}

/// Outcome of a full run: training history plus held-out test scores.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

impl Experiment {
    pub fn checkpoint_meta(&self, model: &VarModel<f32>, config: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            model: model.config().clone(),
            variant: model.variant(),
            train: Some(config.clone()),
            epoch: self.outcome.best_epoch,
            adam_steps: self.outcome.best_adam_steps,
            shuffle_seed: config.seed,
            best_val_accuracy: Some(self.outcome.best_val_accuracy),
        }
    }
}

/// Splits `items` 60/20/20 with `config.seed`, trains on the first part
/// and scores the best weights on the test part. On failure the model
/// still holds the best weights seen.
pub fn run_experiment(model: &mut VarModel<f32>, items: &[RpmItem], config: &TrainConfig) -> Result<Experiment> {
    let split = crate::rpm::split_dataset(items, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &items[i]).collect::<Vec<_>>();
    let (train_items, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let outcome = train(model, &train_items, &val, config)?;
    let test = evaluate(model, &test, config.batch_items, config.pos_weight)?;
    Ok(Experiment { outcome, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7, 0.2]), (1, true));
        assert_eq!(argmax(&[0.9f32, 0.1]), (0, false));
        assert_eq!(argmax(&[0.2f64, 0.2, 0.3]), (2, false));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_items: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            pos_weight: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
