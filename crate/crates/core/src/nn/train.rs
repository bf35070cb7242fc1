use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{sgd_step, AdamState, OptimizerKind};
use super::{Differentiable, Network};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics;
use crate::rng;

/// Mini-batch training settings. Checkpoints are selected by validation macro-F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 40,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("Adam moments need beta in [0,1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Inputs paired with their labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledData<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
}

impl<'a> LabeledData<'a> {
    pub fn new(inputs: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        Ok(LabeledData { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

/// Best checkpoint of a training run plus its per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<M = Network> {
    pub best_network: M,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
}

/// Trains `model` and keeps the weights of the epoch with the highest
/// validation macro-F1. The earliest epoch wins ties. The last mini-batch
/// of an epoch may be smaller than `batch_size`.
pub fn train<M: Differentiable + Clone>(
    mut model: M,
    train_set: LabeledData<'_>,
    val_set: LabeledData<'_>,
    config: &TrainConfig,
) -> Result<TrainedModel<M>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let n_classes = model.n_classes();
    let mut adam = AdamState::new(model.params().len(), config.beta1, config.beta2, config.epsilon);
    let mut rng = rng::seeded(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, M)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs = train_set.inputs.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) = model.loss_and_grad(&inputs, &labels)?;
            loss_sum += loss * batch.len() as f64;
            match config.optimizer {
                OptimizerKind::Adam => adam.step(model.params_mut(), &grads, config.learning_rate)?,
                OptimizerKind::Sgd => sgd_step(model.params_mut(), &grads, config.learning_rate)?,
            }
        }
        let preds = model.predict(val_set.inputs)?;
        let score = metrics::macro_f1(&preds, val_set.labels, n_classes)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_macro_f1: score,
        });
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, model.clone()));
        }
    }

    let (best_epoch, best_val_score, best_network) = best.expect("at least one epoch");
    Ok(TrainedModel {
        best_network,
        best_epoch,
        best_val_score,
        history,
        config: *config,
    })
}
