//! End-to-end segmentation models sharing one training interface.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{DimensionAligner, MaskDecoder};
use crate::encoders::EncoderSet;
use crate::error::{Error, Result};
use crate::fusion::{fuse_late, mean_vars, BaselineSegNet, FusionMode};
use crate::graph::{Graph, Var};
use crate::instruct::VlmProjection;
use crate::loss::{binarize, sigmoid};
use crate::nn::{Builder, DimConfig, WeightInit};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

/// Name prefixes of every trainable tensor of the instruction-prompted model.
pub const TRAINABLE_PREFIXES: [&str; 3] = [VlmProjection::PREFIX, DimensionAligner::PREFIX, MaskDecoder::PREFIX];

/// A model with a parameter store that maps one input to one or more logit maps.
pub trait SegModel {
    type Input;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn mode(&self) -> FusionMode;
    fn logits(&self, g: &mut Graph, p: &Bound, x: &Self::Input) -> Result<Vec<Var>>;

    /// Probability maps with the current weights.
    fn probabilities(&self, x: &Self::Input) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.store().bind(&mut g);
        let outs = self.logits(&mut g, &p, x)?;
        Ok(outs.iter().map(|&v| sigmoid(g.value(v))).collect())
    }

    /// Binary mask; multiple outputs are merged by the late-fusion vote.
    fn predict(&self, x: &Self::Input, threshold: f64) -> Result<Tensor> {
        let probs = self.probabilities(x)?;
        if probs.len() > 1 {
            fuse_late(&probs)
        } else {
            Ok(binarize(&probs[0], threshold))
        }
    }
}

/// How the instruction reaches the dimension aligner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionWiring {
    /// Generated text → frozen text encoder → aligner.
    #[default]
    Text,
    /// Projected vision-language embedding → aligner, bypassing text.
    Embedding,
}

/// Frozen-encoder outputs for one modality image.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub modality: String,
    /// `[C, G, G]`.
    pub embedding: Tensor,
    /// Encoded instruction text, `[1, H_text]`.
    pub instruction: Tensor,
    /// Pooled vision-language embedding, `[1, H_text]`.
    pub vlm: Tensor,
    pub instruction_text: String,
}

#[derive(Debug, Clone)]
pub struct ZeusHead {
    pub projection: VlmProjection,
    pub aligner: DimensionAligner,
    pub decoder: MaskDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeusConfig {
    pub dims: DimConfig,
    pub fusion: FusionMode,
    pub modalities: usize,
    pub wiring: InstructionWiring,
    pub share_weights: bool,
    pub seed: u64,
}

/// Instruction-prompted segmenter: frozen encoders upstream, trainable
/// projection, aligner and two-way decoder here.
#[derive(Debug, Clone)]
pub struct ZeusModel {
    pub cfg: ZeusConfig,
    pub store: ParamStore,
    pub heads: Vec<ZeusHead>,
}

pub const EARLY_NOT_APPLICABLE: &str = "not applicable for early fusion";

impl ZeusModel {
    pub fn new(cfg: ZeusConfig) -> Result<Self> {
        cfg.dims.validate()?;
        if cfg.fusion == FusionMode::Early {
            return Err(Error::Config(format!("instruction-prompted model is {EARLY_NOT_APPLICABLE}")));
        }
        if cfg.modalities == 0 {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if cfg.wiring == InstructionWiring::Embedding && cfg.dims.llm_dim != cfg.dims.text_dim {
            return Err(Error::Config(format!(
                "embedding wiring needs llm_dim == text_dim ({} vs {})",
                cfg.dims.llm_dim, cfg.dims.text_dim
            )));
        }
        let copies = if cfg.fusion == FusionMode::Late && !cfg.share_weights { cfg.modalities } else { 1 };
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let mut b = Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true };
        let heads = (0..copies)
            .map(|i| {
                let suffix = if copies == 1 { String::new() } else { format!(".m{i}") };
                let d = &cfg.dims;
                ZeusHead {
                    projection: VlmProjection::named(&mut b, &format!("{}{suffix}", VlmProjection::PREFIX), d),
                    aligner: DimensionAligner::named(&mut b, &format!("{}{suffix}", DimensionAligner::PREFIX), d.text_dim, d),
                    decoder: MaskDecoder::named(&mut b, &format!("{}{suffix}", MaskDecoder::PREFIX), d),
                }
            })
            .collect();
        Ok(Self { cfg, store, heads })
    }

    fn head(&self, modality: usize) -> &ZeusHead {
        &self.heads[modality.min(self.heads.len() - 1)]
    }

    /// The single sparse-prompt token for one modality.
    pub fn prompt(&self, g: &mut Graph, p: &Bound, head: &ZeusHead, f: &ModalityFeatures) -> Result<Var> {
        let e = match self.cfg.wiring {
            InstructionWiring::Text => g.constant(f.instruction.clone()),
            InstructionWiring::Embedding => {
                let v = g.constant(f.vlm.clone());
                head.projection.forward(g, p, v)?
            }
        };
        head.aligner.forward(g, p, e)
    }

    pub fn trainable_count(&self) -> usize {
        self.store.count_trainable()
    }

    /// Every parameter tensor, frozen encoders first, with its trainability.
    pub fn manifest(&self, encoders: &EncoderSet) -> Vec<(String, usize, bool)> {
        let mut out = Vec::new();
        for enc in encoders.frozen() {
            for (_, p) in enc.store.iter() {
                out.push((p.name.clone(), p.value.numel(), p.trainable));
            }
        }
        for (_, p) in self.store.iter() {
            out.push((p.name.clone(), p.value.numel(), p.trainable));
        }
        out
    }
}

impl SegModel for ZeusModel {
    type Input = Vec<ModalityFeatures>;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn mode(&self) -> FusionMode {
        self.cfg.fusion
    }

    fn logits(&self, g: &mut Graph, p: &Bound, feats: &Vec<ModalityFeatures>) -> Result<Vec<Var>> {
        if feats.len() != self.cfg.modalities {
            return Err(Error::Input(format!(
                "model expects {} modalities, got {}",
                self.cfg.modalities,
                feats.len()
            )));
        }
        match self.cfg.fusion {
            FusionMode::Hybrid => {
                let head = self.head(0);
                let mut embs = Vec::with_capacity(feats.len());
                let mut prompts = Vec::with_capacity(feats.len());
                for f in feats {
                    embs.push(g.constant(f.embedding.clone()));
                    prompts.push(self.prompt(g, p, head, f)?);
                }
                let e = mean_vars(g, &embs)?;
                let q = mean_vars(g, &prompts)?;
                Ok(alloc::vec![head.decoder.forward(g, p, e, q)?])
            }
            FusionMode::Late => feats
                .iter()
                .enumerate()
                .map(|(m, f)| {
                    let head = self.head(m);
                    let e = g.constant(f.embedding.clone());
                    let q = self.prompt(g, p, head, f)?;
                    head.decoder.forward(g, p, e, q)
                })
                .collect(),
            FusionMode::Early => Err(Error::Config(EARLY_NOT_APPLICABLE.into())),
        }
    }
}

/// The convolutional baseline together with its parameters.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub net: BaselineSegNet,
    pub store: ParamStore,
}

impl BaselineModel {
    pub fn new(mode: FusionMode, modalities: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut b = Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true };
        let net = BaselineSegNet::new(&mut b, mode, modalities)?;
        Ok(Self { net, store })
    }
}

impl SegModel for BaselineModel {
    /// One `[1, S, S]` image per modality.
    type Input = Vec<Tensor>;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn mode(&self) -> FusionMode {
        self.net.mode
    }

    fn logits(&self, g: &mut Graph, p: &Bound, x: &Vec<Tensor>) -> Result<Vec<Var>> {
        self.net.forward(g, p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fusion: FusionMode, modalities: usize, share: bool) -> ZeusConfig {
        ZeusConfig {
            dims: DimConfig::micro(),
            fusion,
            modalities,
            wiring: InstructionWiring::Text,
            share_weights: share,
            seed: 1,
        }
    }

    fn features(dims: &DimConfig, k: f64) -> ModalityFeatures {
        let g = dims.grid();
        ModalityFeatures {
            modality: "T1".into(),
            embedding: Tensor::from_fn(&[dims.embed_dim, g, g], |i| libm::sin(k + i as f64)),
            instruction: Tensor::from_fn(&[1, dims.text_dim], |i| libm::cos(k * i as f64)),
            vlm: Tensor::from_fn(&[1, dims.text_dim], |i| i as f64 / 10.0),
            instruction_text: "x".into(),
        }
    }

    #[test]
    fn early_fusion_is_rejected() {
        let err = ZeusModel::new(cfg(FusionMode::Early, 2, true)).unwrap_err();
        assert!(format!("{err}").contains(EARLY_NOT_APPLICABLE));
    }

    #[test]
    fn only_trainable_prefixes_in_store() {
        let m = ZeusModel::new(cfg(FusionMode::Late, 4, true)).unwrap();
        for name in m.store.trainable_names() {
            assert!(TRAINABLE_PREFIXES.iter().any(|p| name.starts_with(&format!("{p}."))), "{name}");
        }
        let h = &m.heads[0];
        let by_parts = h.projection.param_count() + h.aligner.param_count() + m.store.count_prefix("mask_decoder.");
        assert_eq!(m.trainable_count(), by_parts);
    }

    #[test]
    fn shared_late_count_is_modality_independent() {
        let two = ZeusModel::new(cfg(FusionMode::Late, 2, true)).unwrap().trainable_count();
        let four = ZeusModel::new(cfg(FusionMode::Late, 4, true)).unwrap().trainable_count();
        assert_eq!(two, four);
        let unshared = ZeusModel::new(cfg(FusionMode::Late, 4, false)).unwrap().trainable_count();
        assert_eq!(unshared, 4 * four);
    }

    #[test]
    fn forward_shapes_per_mode() {
        let dims = DimConfig::micro();
        let feats: Vec<_> = (0..3).map(|k| features(&dims, k as f64)).collect();
        for (mode, n) in [(FusionMode::Hybrid, 1), (FusionMode::Late, 3)] {
            let m = ZeusModel::new(cfg(mode, 3, true)).unwrap();
            let probs = m.probabilities(&feats).unwrap();
            assert_eq!(probs.len(), n);
            assert_eq!(probs[0].shape(), &[16, 16]);
            let pred = m.predict(&feats, 0.5).unwrap();
            assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn embedding_wiring_uses_projection() {
        let c = ZeusConfig { wiring: InstructionWiring::Embedding, ..cfg(FusionMode::Late, 1, true) };
        let m = ZeusModel::new(c).unwrap();
        let dims = DimConfig::micro();
        let feats = alloc::vec![features(&dims, 0.3)];
        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let out = m.logits(&mut g, &p, &feats).unwrap();
        let loss = g.sum(out[0]);
        let grads = g.backward(loss).unwrap();
        let w = m.heads[0].projection.mlp.layers[0].weight;
        assert!(grads.get(p[w]).max_abs() > 0.0);
    }
}
