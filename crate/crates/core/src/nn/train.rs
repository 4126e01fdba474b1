use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::Objective;
use super::optim::{clip_global_norm, Adam};
use super::seq2seq::Seq2Seq;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Smallest validation improvement that resets the patience counter.
    pub min_delta: f64,
    pub patience: usize,
    /// Cap on optimizer steps per epoch; `None` uses the whole training set.
    pub max_batches_per_epoch: Option<usize>,
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            learning_rate: 1e-4,
            max_epochs: 100,
            min_delta: 0.001,
            patience: 2,
            max_batches_per_epoch: None,
            clip_norm: Some(5.0),
            lr_decay: 1.0,
        }
    }
}

/// Inputs (N, T, d) and targets (N, L, C).
#[derive(Debug, Clone, PartialEq)]
pub struct SeqData {
    pub inputs: Array3<f64>,
    pub targets: Array3<f64>,
}

impl SeqData {
    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> (Array3<f64>, Array3<f64>) {
        (self.inputs.select(Axis(0), idx), self.targets.select(Axis(0), idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Patience-based early stopping on a monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub min_delta: f64,
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        Self {
            min_delta,
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
            StopDecision::Improved
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

/// Mean loss over a dataset, evaluated in chunks with autoregressive prediction.
pub fn evaluate(model: &Seq2Seq, objective: &Objective, data: &SeqData) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let horizon = data.targets.dim().1;
    let mut total = 0.0;
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let x = data.inputs.slice(s![start..end, .., ..]);
        let y = data.targets.slice(s![start..end, .., ..]);
        let pred = model.predict(x, horizon)?;
        total += objective.loss(pred.view(), y) * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// One optimizer step on a batch. Returns the batch loss.
pub fn train_step(
    model: &mut Seq2Seq,
    objective: &Objective,
    adam: &mut Adam,
    x: ArrayView3<f64>,
    y: ArrayView3<f64>,
    clip: Option<f64>,
) -> Result<f64> {
    let (pred, cache) = model.forward(x, y.dim().1)?;
    let (loss, d_out) = objective.loss_and_grad(pred.view(), y);
    let mut grads = model.backward(&cache, d_out.view());
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    adam.update(&mut model.params, &grads);
    Ok(loss)
}

/// Mini-batch Adam with early stopping on validation loss. The parameters of the
/// best validation epoch are restored at the end.
pub fn fit(
    model: &mut Seq2Seq,
    objective: &Objective,
    train: &SeqData,
    val: &SeqData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || cfg.max_epochs == 0 {
        return Err(Error::config("batch_size, learning_rate and max_epochs must be positive"));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(Error::config(format!("lr_decay must lie in (0, 1], got {}", cfg.lr_decay)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.min_delta, cfg.patience);
    let mut history = TrainHistory::default();
    let mut best_params = model.params.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(m) = cfg.max_batches_per_epoch {
            batches.truncate(m);
        }
        let mut sum = 0.0;
        let mut seen = 0usize;
        for idx in batches {
            let (x, y) = train.gather(idx);
            let loss = train_step(model, objective, &mut adam, x.view(), y.view(), cfg.clip_norm)?;
            if !loss.is_finite() || !model.params.all_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {loss}"),
                });
            }
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = sum / seen as f64;
        adam.learning_rate *= cfg.lr_decay;
        let val_loss = evaluate(model, objective, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("validation loss became {val_loss}"),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.update(val_loss) {
            StopDecision::Improved => {
                history.best_epoch = epoch;
                best_params = model.params.clone();
            }
            StopDecision::Wait => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    Ok(history)
}
