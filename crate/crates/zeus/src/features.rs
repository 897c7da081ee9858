//! Turns modality stacks into model inputs.

use zeus_core::encoders::EncoderSet;
use zeus_core::instruct::{InstructionGenerator, LlmBackend};
use zeus_core::model::{ModalityFeatures, ZeusModel};
use zeus_core::synth::{resize_nearest, ModalityStack, INSTANCE};
use zeus_core::Tensor;

use crate::dataset::{Source, Split};
use crate::error::Result;

pub type BaselineSample = (Vec<Tensor>, Tensor);
pub type ZeusSample = (Vec<ModalityFeatures>, Tensor);

/// Identifies where a sample came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleKey {
    pub subject_id: String,
    pub slice_index: usize,
}

impl SampleKey {
    pub fn file_stem(&self) -> String {
        format!("{}_{:03}", self.subject_id, self.slice_index)
    }
}

/// Label at the resolution the models predict.
pub fn target(stack: &ModalityStack, mask_size: usize) -> Result<Tensor> {
    Ok(resize_nearest(&stack.label, mask_size)?)
}

/// Baseline nets see every modality at mask resolution.
pub fn baseline_sample(stack: &ModalityStack, mask_size: usize) -> Result<BaselineSample> {
    let images = stack.images.iter().map(|im| resize_nearest(im, mask_size)).collect::<Result<Vec<_>, _>>()?;
    Ok((images, target(stack, mask_size)?))
}

/// Frozen-encoder features plus generated instructions for each modality.
pub struct FeatureExtractor<'a> {
    pub encoders: &'a EncoderSet,
    pub model: &'a ZeusModel,
    pub backend: &'a dyn LlmBackend,
}

impl FeatureExtractor<'_> {
    pub fn sample(&self, stack: &ModalityStack) -> Result<ZeusSample> {
        let dims = self.model.cfg.dims;
        // Instructions come from the first head's projection; heads differ only when unshared.
        let head = &self.model.heads[0];
        let gen = InstructionGenerator {
            vlm: &self.encoders.vlm,
            text: &self.encoders.text,
            projection: &head.projection,
            store: &self.model.store,
        };
        let mut feats = Vec::with_capacity(stack.images.len());
        for (img, name) in stack.images.iter().zip(&stack.modality_names) {
            let img = resize_nearest(img, dims.img_size)?;
            let rec = gen.generate(&img, INSTANCE, name, self.backend)?;
            feats.push(ModalityFeatures {
                modality: name.clone(),
                embedding: self.encoders.image.encode(&img)?,
                instruction: rec.embedding,
                vlm: rec.vlm_embedding,
                instruction_text: rec.instruction_text,
            });
        }
        Ok((feats, target(stack, dims.mask_size)?))
    }
}

/// Maps every stack of a split (restricted to `modalities`) through `f`.
pub fn collect<T>(
    source: &Source,
    split: Split,
    modalities: &[String],
    mut f: impl FnMut(&ModalityStack) -> Result<T>,
) -> Result<(Vec<T>, Vec<SampleKey>)> {
    let mut out = Vec::new();
    let mut keys = Vec::new();
    for i in source.split(split) {
        for stack in source.stacks(i)? {
            let stack = stack.select(modalities)?;
            out.push(f(&stack)?);
            keys.push(SampleKey { subject_id: stack.subject_id.clone(), slice_index: stack.slice_index });
        }
    }
    Ok((out, keys))
}
