//! Mini-batch training and evaluation for any [`SegModel`].

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{dsc, miou, segmentation_loss, LossConfig};
use crate::model::SegModel;
use crate::optim::{lr_at, Adam, AdamConfig, EarlyStopping};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            early_stop_patience: 75,
            batch_size: 10,
            lr0: 1e-3,
            poly_power: 0.9,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 >= 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::Config("lr0 must be >= 0 and poly_power > 0".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new<M: SegModel>(model: &M, cfg: &TrainConfig) -> Self {
        Self::new_from_store(model.store(), cfg)
    }

    pub fn new_from_store(store: &crate::params::ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(cfg.adam, store),
            epoch: 0,
            stopper: EarlyStopping::new(cfg.early_stop_patience),
            stopped_early: false,
        }
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.stopped_early || self.epoch >= cfg.epochs
    }
}

/// Sample order for an epoch; a pure function of seed and epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let stream = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    order
}

/// Loss on one sample: averaged over per-modality outputs when there are several.
pub fn sample_loss<M: SegModel>(
    model: &M,
    g: &mut Graph,
    p: &crate::params::Bound,
    x: &M::Input,
    label: &Tensor,
    cfg: &LossConfig,
) -> Result<crate::graph::Var> {
    let outs = model.logits(g, p, x)?;
    let t = g.constant(label.clone());
    let mut losses = Vec::with_capacity(outs.len());
    for o in outs {
        losses.push(segmentation_loss(g, o, t, cfg)?);
    }
    crate::fusion::mean_vars(g, &losses)
}

/// Runs one epoch of mini-batch Adam and reports the mean sample loss.
pub fn train_epoch<M: SegModel>(
    model: &mut M,
    data: &[(M::Input, Tensor)],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<EpochRecord> {
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let epoch = state.epoch;
    let lr = lr_at(epoch, cfg.epochs, cfg.lr0, cfg.poly_power)?;
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut losses = alloc::vec![0.0; data.len()];
    for batch in order.chunks(cfg.batch_size) {
        model.store_mut().zero_grad();
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let (x, label) = &data[i];
            let mut g = Graph::new();
            let p = model.store().bind(&mut g);
            let loss = sample_loss(model, &mut g, &p, x, label, &cfg.loss)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at epoch {epoch}, sample {i}")));
            }
            losses[i] = value;
            let grads = g.backward(loss)?;
            model.store_mut().accumulate(&p, &grads, scale);
        }
        state.adam.step(model.store_mut(), lr);
    }
    // Summed in index order so the value does not depend on the shuffle.
    let loss = losses.iter().sum::<f64>() / data.len() as f64;
    state.epoch += 1;
    if state.stopper.observe(loss) {
        state.stopped_early = true;
    }
    Ok(EpochRecord { epoch, lr, loss })
}

/// Trains until the epoch budget or early stopping, calling `on_epoch` after each epoch.
pub fn fit<M: SegModel>(
    model: &mut M,
    data: &[(M::Input, Tensor)],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochRecord, &M, &TrainState) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut history = Vec::new();
    while !state.finished(cfg) {
        let rec = train_epoch(model, data, state, cfg)?;
        on_epoch(&rec, model, state)?;
        history.push(rec);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dsc: f64,
    pub miou: f64,
}

/// Mean metrics over (prediction, label) pairs.
pub fn mean_scores(pairs: &[(Tensor, Tensor)]) -> Result<Scores> {
    if pairs.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let (mut d, mut m) = (0.0, 0.0);
    for (pred, label) in pairs {
        d += dsc(pred, label)?;
        m += miou(pred, label)?;
    }
    let n = pairs.len() as f64;
    Ok(Scores { dsc: d / n, miou: m / n })
}

/// Thresholded predictions for every sample.
pub fn predict_all<M: SegModel>(model: &M, data: &[(M::Input, Tensor)], threshold: f64) -> Result<Vec<Tensor>> {
    data.iter().map(|(x, _)| model.predict(x, threshold)).collect()
}

pub fn evaluate<M: SegModel>(model: &M, data: &[(M::Input, Tensor)], threshold: f64) -> Result<Scores> {
    let preds = predict_all(model, data, threshold)?;
    let pairs: Vec<(Tensor, Tensor)> = preds.into_iter().zip(data.iter().map(|(_, l)| l.clone())).collect();
    mean_scores(&pairs)
}
