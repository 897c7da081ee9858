//! Run configuration, serialized verbatim into every run directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use zeus_core::fusion::FusionMode;
use zeus_core::instruct::BackendKind;
use zeus_core::loss::LossConfig;
use zeus_core::model::{InstructionWiring, ZeusConfig};
use zeus_core::optim::AdamConfig;
use zeus_core::synth::{SynthParams, VolumeDims, MODALITIES};
use zeus_core::train::TrainConfig;
use zeus_core::{DimConfig, Error};

use crate::error::{read_file, Result};

/// Which segmenter a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    /// Instruction-prompted model on frozen encoders.
    #[default]
    Zeus,
    /// Fully trainable convolutional reference net.
    Baseline,
}

impl Network {
    pub const ALL: [Network; 2] = [Network::Zeus, Network::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Network::Zeus => "zeus",
            Network::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Network::ALL
            .into_iter()
            .find(|n| n.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown network {s:?} (expected zeus or baseline)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completions base URL; `ZEUS_LLM_URL` overrides it.
    pub url: String,
    /// Model name; `ZEUS_LLM_MODEL` overrides it.
    pub model: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    /// First retry delay; doubled after every failed attempt.
    pub base_delay_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Stub,
            url: "http://127.0.0.1:8000".into(),
            model: "local".into(),
            timeout_secs: 60,
            max_attempts: 3,
            base_delay_ms: 1000,
        }
    }
}

/// Size and seed of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub subjects: usize,
    pub modalities: usize,
    pub volume: VolumeDims,
    pub synth: SynthParams,
    pub seed: u64,
    /// Drop slices whose label is empty.
    pub drop_empty: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            subjects: 60,
            modalities: 4,
            volume: VolumeDims::default(),
            synth: SynthParams::default(),
            seed: 0,
            drop_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), runs_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: Network,
    pub dims: DimConfig,
    pub fusion: FusionMode,
    pub wiring: InstructionWiring,
    /// Late fusion: one decoder shared by all modalities.
    pub share_weights: bool,
    pub backend: BackendConfig,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Seed of the frozen encoder weights.
    pub encoder_seed: u64,
    /// Modalities fed to the model; empty means all.
    pub modality_subset: Vec<String>,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            network: Network::Zeus,
            dims: DimConfig::default(),
            fusion: FusionMode::Late,
            wiring: InstructionWiring::Text,
            share_weights: true,
            backend: BackendConfig::default(),
            epochs: t.epochs,
            early_stop_patience: t.early_stop_patience,
            batch_size: t.batch_size,
            lr0: t.lr0,
            weight_decay: t.adam.weight_decay,
            poly_power: t.poly_power,
            loss: LossConfig::default(),
            seed: 0,
            encoder_seed: 7,
            modality_subset: Vec::new(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path)?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            early_stop_patience: self.early_stop_patience,
            batch_size: self.batch_size,
            lr0: self.lr0,
            poly_power: self.poly_power,
            adam: AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() },
            loss: self.loss,
            seed: self.seed,
        }
    }

    pub fn zeus_config(&self) -> ZeusConfig {
        ZeusConfig {
            dims: self.dims,
            fusion: self.fusion,
            modalities: self.modalities().len(),
            wiring: self.wiring,
            share_weights: self.share_weights,
            seed: self.seed,
        }
    }

    /// Names of the modalities the dataset provides.
    pub fn available_modalities(&self) -> Vec<String> {
        MODALITIES[..self.data.modalities.min(MODALITIES.len())].iter().map(|s| s.to_string()).collect()
    }

    /// Modalities the model consumes, in dataset order.
    pub fn modalities(&self) -> Vec<String> {
        if self.modality_subset.is_empty() {
            self.available_modalities()
        } else {
            self.modality_subset.clone()
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), Error> {
        self.dims.validate()?;
        self.train_config().validate()?;
        if self.network == Network::Zeus && self.fusion == FusionMode::Early {
            return Err(Error::Config(format!("instruction-prompted model is {}", zeus_core::model::EARLY_NOT_APPLICABLE)));
        }
        if self.data.modalities == 0 || self.data.modalities > MODALITIES.len() {
            return Err(Error::Config(format!("data.modalities must be in 1..={}", MODALITIES.len())));
        }
        if self.data.subjects < 3 {
            return Err(Error::Config("need at least 3 subjects for a train/val/test split".into()));
        }
        let available = self.available_modalities();
        for (i, name) in self.modality_subset.iter().enumerate() {
            if !available.contains(name) {
                return Err(Error::Config(format!("unknown modality {name:?}; available: {available:?}")));
            }
            if self.modality_subset[..i].contains(name) {
                return Err(Error::Config(format!("modality {name:?} listed twice")));
            }
        }
        if self.backend.max_attempts == 0 {
            return Err(Error::Config("backend.max_attempts must be positive".into()));
        }
        Ok(())
    }
}
