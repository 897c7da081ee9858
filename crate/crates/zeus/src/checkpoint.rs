//! Single-file checkpoints: every trainable tensor with its Adam moments,
//! packed into one `.zt` payload and described by the header.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use zeus_core::optim::EarlyStopping;
use zeus_core::params::ParamStore;
use zeus_core::train::{TrainConfig, TrainState};
use zeus_core::{Error, Tensor};

use crate::error::{Result, ZeusError};
use crate::zt::{self, Dtype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything except the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Next epoch to run.
    pub epoch: usize,
    /// The shuffle stream is a pure function of (seed, epoch).
    pub seed: u64,
    pub adam_step: u64,
    pub best_loss_bits: u64,
    pub stale_epochs: usize,
    pub stopped_early: bool,
    /// Hex SHA-256 of each frozen encoder, in (image, vision-language, text) order.
    pub frozen_checksums: Vec<String>,
    pub entries: Vec<Entry>,
}

pub fn save(path: &Path, store: &ParamStore, state: &TrainState, seed: u64, frozen_checksums: Vec<String>) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let trainable = store.iter().map(|(_, p)| p).filter(|p| p.trainable);
    for ((p, m), v) in trainable.zip(&state.adam.m).zip(&state.adam.v) {
        entries.push(Entry { name: p.name.clone(), shape: p.value.shape().to_vec() });
        payload.extend_from_slice(p.value.data());
        payload.extend_from_slice(m);
        payload.extend_from_slice(v);
    }
    let meta = CheckpointMeta {
        epoch: state.epoch,
        seed,
        adam_step: state.adam.step,
        best_loss_bits: state.stopper.best.to_bits(),
        stale_epochs: state.stopper.stale,
        stopped_early: state.stopped_early,
        frozen_checksums,
        entries,
    };
    let Value::Object(mut extra) = serde_json::to_value(&meta)? else { unreachable!() };
    extra.insert("kind".into(), Value::from("checkpoint"));
    let n = payload.len();
    zt::write_with(path, &Tensor::new(&[n], payload)?, Dtype::F64, extra)
}

/// Restores weights into `store` and returns the matching training state.
pub fn load(path: &Path, store: &mut ParamStore, cfg: &TrainConfig) -> Result<(TrainState, CheckpointMeta)> {
    let (t, header) = zt::read_with_header(path)?;
    let mut extra: Map<String, Value> = header.extra;
    if extra.remove("kind").as_ref().and_then(Value::as_str) != Some("checkpoint") {
        return Err(ZeusError::format(path, "not a checkpoint"));
    }
    let meta: CheckpointMeta = serde_json::from_value(Value::Object(extra))?;
    let trainable: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    if trainable.len() != meta.entries.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} trainable tensors, model has {}",
            meta.entries.len(),
            trainable.len()
        ))
        .into());
    }
    let data = t.data();
    let mut off = 0;
    let mut state_m = Vec::with_capacity(trainable.len());
    let mut state_v = Vec::with_capacity(trainable.len());
    for ((id, name), entry) in trainable.into_iter().zip(&meta.entries) {
        let p = store.get_mut(id);
        if name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Input(format!("checkpoint tensor {} {:?} does not match model tensor {name}", entry.name, entry.shape)).into());
        }
        let n = p.value.numel();
        if data.len() < off + 3 * n {
            return Err(ZeusError::format(path, "payload shorter than its entries"));
        }
        p.value.data_mut().copy_from_slice(&data[off..off + n]);
        state_m.push(data[off + n..off + 2 * n].to_vec());
        state_v.push(data[off + 2 * n..off + 3 * n].to_vec());
        off += 3 * n;
    }
    if off != data.len() {
        return Err(ZeusError::format(path, "payload longer than its entries"));
    }
    let mut state = TrainState::new_from_store(store, cfg);
    state.adam.step = meta.adam_step;
    state.adam.m = state_m;
    state.adam.v = state_v;
    state.epoch = meta.epoch;
    state.stopper = EarlyStopping { patience: cfg.early_stop_patience, best: f64::from_bits(meta.best_loss_bits), stale: meta.stale_epochs };
    state.stopped_early = meta.stopped_early;
    Ok((state, meta))
}
