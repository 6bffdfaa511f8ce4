use std::path::PathBuf;

use lumen_autodiff::{AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, TrainState};
use super::{images_to_tensor, loss_on_graph, LightNet, LossWeights, Targets};
use crate::error::{LumenError, Result};
use crate::lightmath::{direction_error_deg, rgb_angular_error_deg, LightColor};
use crate::scenegen::LightGT;

/// One training example: a `[3, S, S]` input in [0, 1] and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub size: usize,
    pub gt: LightGT,
}

impl Sample {
    pub fn from_image(img: &image::RgbImage, gt: LightGT) -> Result<Self> {
        if img.width() != img.height() {
            return Err(LumenError::InvalidArgument(format!("image {}x{} is not square", img.width(), img.height())));
        }
        Ok(Self { input: images_to_tensor(&[img])?.into_data(), size: img.width() as usize, gt })
    }
}

fn batch_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let s = samples[0].size;
    let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
    for x in samples {
        if x.size != s {
            return Err(LumenError::InvalidArgument("samples in a batch differ in size".into()));
        }
        data.extend_from_slice(&x.input);
    }
    Ok(Tensor::new(&[samples.len(), 3, s, s], data)?)
}

/// Reduces the learning rate by `factor` once the monitored loss has failed
/// to improve on its best by more than `threshold` for `patience` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self { lr, factor, patience, threshold, best: None, bad_epochs: 0 }
    }

    /// Feeds one epoch's monitored loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if !(loss < b - self.threshold) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub max_epochs: usize,
    /// Stops mid-epoch once this many updates have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Reshuffle the training set every epoch.
    pub shuffle: bool,
    pub weights: LossWeights,
    /// Written after every epoch when set.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 2e-4,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            max_epochs: 30,
            max_steps: None,
            seed: 0,
            shuffle: true,
            weights: LossWeights::default(),
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LumenError::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(LumenError::InvalidArgument(format!("plateau factor {} outside (0, 1)", self.plateau_factor)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LumenError::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub direction_error: f64,
    pub color_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Updates run so far, this epoch included.
    pub steps: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Mean loss over this epoch's batches, weighted by batch size.
    pub train_loss: f64,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Mean loss and errors of `model` over `samples`, forward only.
pub fn evaluate_samples(model: &LightNet, samples: &[Sample], weights: &LossWeights, batch: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(LumenError::InvalidArgument("no samples to evaluate".into()));
    }
    let (mut loss, mut dir, mut col) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let bound = model.params.bind_constants(&mut g);
        let x = g.constant(batch_tensor(&refs)?);
        let heads = model.forward(&mut g, &bound, x)?;
        let gts: Vec<LightGT> = chunk.iter().map(|s| s.gt).collect();
        let l = loss_on_graph(&mut g, &heads, &Targets::new(&gts), weights)?;
        loss += g.value(l).data()[0] * chunk.len() as f64;
        for (est, gt) in heads.estimates(&g).iter().zip(&gts) {
            let p = est.decode()?;
            dir += direction_error_deg((p.delta_pan, p.delta_tilt), (gt.delta_pan, gt.delta_tilt));
            col += rgb_angular_error_deg(LightColor::from_array(est.rgb), gt.color)?;
        }
    }
    let n = samples.len() as f64;
    Ok(Metrics { loss: loss / n, direction_error: dir / n, color_error: col / n })
}

/// Mini-batch Adam with a plateau schedule on the validation loss, or on the
/// training loss when `val` is empty.
pub fn fit(model: &mut LightNet, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.check()?;
    if train.is_empty() {
        return Err(LumenError::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let adam = AdamConfig::default();
    let mut log = TrainLog::default();
    let mut steps = 0usize;
    model.params.zero_grads();

    for epoch in 0..cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = sched.lr;
        let (mut total, mut seen) = (0.0, 0usize);
        let mut stopped = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.constant(batch_tensor(&batch)?);
            let heads = model.forward(&mut g, &bound, x)?;
            let gts: Vec<LightGT> = batch.iter().map(|s| s.gt).collect();
            let loss = loss_on_graph(&mut g, &heads, &Targets::new(&gts), &cfg.weights)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(LumenError::Degenerate(format!("loss became {value} at step {steps}")));
            }
            g.backward(loss)?;
            model.params.accumulate_grads(&g, &bound);
            model.params.adam_step(lr, adam);
            total += value * batch.len() as f64;
            seen += batch.len();
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stopped = true;
                break;
            }
        }
        let train_loss = total / seen as f64;
        let val_metrics =
            if val.is_empty() { None } else { Some(evaluate_samples(model, val, &cfg.weights, cfg.batch_size)?) };
        sched.step(val_metrics.map_or(train_loss, |m| m.loss));
        log.epochs.push(EpochLog { epoch, steps, lr, train_loss, val: val_metrics });
        if let Some(path) = &cfg.checkpoint {
            save_checkpoint(path, model, &TrainState { epoch: epoch + 1, steps, scheduler: sched })?;
        }
        if stopped {
            break;
        }
    }
    Ok(log)
}
