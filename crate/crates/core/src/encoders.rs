//! The three frozen encoders: the image encoder producing the image
//! embedding grid, the vision-language image encoder feeding instruction
//! generation, and the instruction text encoder.
//!
//! Weights are drawn from a seeded truncated normal to stand in for
//! pretrained checkpoints and are never updated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, DimConfig, LayerNorm, Linear, PatchEmbed, TransformerLayer, WeightInit};
use crate::params::{hex_digest, Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub const PRETRAINED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ImageEnc,
    VlmVision,
    TextEnc,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::ImageEnc => "image_encoder",
            EncoderKind::VlmVision => "vlm_vision_encoder",
            EncoderKind::TextEnc => "instruction_encoder",
        }
    }

    fn stream(self) -> u64 {
        match self {
            EncoderKind::ImageEnc => 0x1111_0000,
            EncoderKind::VlmVision => 0x2222_0000,
            EncoderKind::TextEnc => 0x3333_0000,
        }
    }
}

/// Weights of one frozen encoder plus the identity needed to rebuild them.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub kind: EncoderKind,
    pub seed: u64,
    pub dims: DimConfig,
    pub store: ParamStore,
}

impl FrozenEncoder {
    /// Always true; there is no API that unfreezes an encoder.
    pub fn frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| !p.trainable)
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.store.checksum()
    }

    pub fn checksum_hex(&self) -> String {
        hex_digest(&self.checksum())
    }

    fn builder_parts(kind: EncoderKind, seed: u64) -> (ParamStore, Init) {
        (ParamStore::new(), Init::new(seed ^ kind.stream()))
    }
}

fn frozen_builder<'a>(store: &'a mut ParamStore, init: &'a mut Init) -> Builder<'a> {
    Builder {
        store,
        init,
        scheme: WeightInit::TruncNormal(PRETRAINED_STD),
        trainable: false,
    }
}

/// Patch embedding followed by pre-norm transformer layers.
#[derive(Debug, Clone)]
struct VisionBody {
    embed: PatchEmbed,
    layers: Vec<TransformerLayer>,
}

impl VisionBody {
    fn new(b: &mut Builder, prefix: &str, side: usize, patch: usize, width: usize, cfg: &DimConfig) -> Self {
        let embed = PatchEmbed::new(b, &format!("{prefix}.patch_embed"), 1, side, patch, width);
        let layers = (0..cfg.depth_enc)
            .map(|i| TransformerLayer::new(b, &format!("{prefix}.layer{i}"), width, cfg.heads))
            .collect();
        Self { embed, layers }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let mut x = self.embed.forward(g, p, image)?;
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        Ok(x)
    }
}

/// Accepts `[S, S]` or `[1, S, S]` and returns a `[1, S, S]` copy.
fn as_single_channel(image: &Tensor, expected: usize) -> Result<Tensor> {
    let s = image.shape();
    let side = match *s {
        [h, w] if h == w => h,
        [1, h, w] if h == w => h,
        _ => {
            return Err(Error::Shape {
                op: "encoder input",
                detail: format!("expected a square single-channel image, got {:?}", s),
            })
        }
    };
    if side != expected {
        return Err(Error::ResizeRequired { expected, got: s.to_vec() });
    }
    image.clone().reshape(&[1, side, side])
}

/// Image encoder: `[S, S]` image to a `C × S/p × S/p` embedding grid.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub frozen: FrozenEncoder,
    body: VisionBody,
}

impl ImageEncoder {
    pub fn new(dims: &DimConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        let kind = EncoderKind::ImageEnc;
        let (mut store, mut init) = FrozenEncoder::builder_parts(kind, seed);
        let body = VisionBody::new(
            &mut frozen_builder(&mut store, &mut init),
            kind.name(),
            dims.img_size,
            dims.patch,
            dims.embed_dim,
            dims,
        );
        Ok(Self {
            frozen: FrozenEncoder { kind, seed, dims: *dims, store },
            body,
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let dims = &self.frozen.dims;
        let x = as_single_channel(image, dims.img_size)?;
        let mut g = Graph::new();
        let p = self.frozen.store.bind(&mut g);
        let x = g.constant(x);
        let tokens = self.body.forward(&mut g, &p, x)?;
        let grid = dims.grid();
        g.value(tokens)
            .transpose2d()?
            .reshape(&[dims.embed_dim, grid, grid])
    }
}

/// Vision-language image encoder: `[S', S']` image to a pooled `1 × H_text` vector.
#[derive(Debug, Clone)]
pub struct VlmEncoder {
    pub frozen: FrozenEncoder,
    body: VisionBody,
}

impl VlmEncoder {
    pub fn new(dims: &DimConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        let kind = EncoderKind::VlmVision;
        let (mut store, mut init) = FrozenEncoder::builder_parts(kind, seed);
        let body = VisionBody::new(
            &mut frozen_builder(&mut store, &mut init),
            kind.name(),
            dims.vlm_size,
            dims.patch,
            dims.text_dim,
            dims,
        );
        Ok(Self {
            frozen: FrozenEncoder { kind, seed, dims: *dims, store },
            body,
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let x = as_single_channel(image, self.frozen.dims.vlm_size)?;
        let mut g = Graph::new();
        let p = self.frozen.store.bind(&mut g);
        let x = g.constant(x);
        let tokens = self.body.forward(&mut g, &p, x)?;
        let pooled = g.mean_rows(tokens)?;
        Ok(g.value(pooled).clone())
    }
}

/// Word-level hashing tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabHasher {
    pub vocab_size: usize,
    pub seed: u64,
}

impl VocabHasher {
    pub fn token_id(&self, word: &str) -> usize {
        // FNV-1a over the seed bytes then the word bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.seed.to_le_bytes().iter().chain(word.as_bytes()) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.vocab_size as u64) as usize
    }

    /// Whitespace-separated words to ids; runs of whitespace collapse.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }
}

/// Instruction encoder: text to a pooled `1 × H_text` embedding followed by
/// the frozen output projection.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub frozen: FrozenEncoder,
    pub hasher: VocabHasher,
    table: crate::params::ParamId,
    pos: crate::params::ParamId,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(dims: &DimConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        let kind = EncoderKind::TextEnc;
        let (mut store, mut init) = FrozenEncoder::builder_parts(kind, seed);
        let mut b = frozen_builder(&mut store, &mut init);
        let prefix = kind.name();
        let h = dims.text_dim;
        let table = b.weight(&format!("{prefix}.token_table"), &[dims.vocab_size, h], h);
        let pos = b.weight(&format!("{prefix}.pos"), &[dims.max_tokens, h], h);
        let layers = (0..dims.depth_enc)
            .map(|i| TransformerLayer::new(&mut b, &format!("{prefix}.layer{i}"), h, dims.heads))
            .collect();
        let final_norm = LayerNorm::new(&mut b, &format!("{prefix}.final_norm"), h);
        let proj = Linear::new(&mut b, &format!("{prefix}.output_proj"), h, h, true);
        Ok(Self {
            frozen: FrozenEncoder { kind, seed, dims: *dims, store },
            hasher: VocabHasher { vocab_size: dims.vocab_size, seed },
            table,
            pos,
            layers,
            final_norm,
            proj,
        })
    }

    /// Encodes the whole instruction as one sentence. Instructions longer than
    /// `max_tokens` words are truncated.
    pub fn encode(&self, instruction: &str) -> Result<Tensor> {
        let mut ids = self.hasher.tokenize(instruction);
        if ids.is_empty() {
            return Err(Error::Input("instruction text is empty".into()));
        }
        let dims = &self.frozen.dims;
        ids.truncate(dims.max_tokens);
        let h = dims.text_dim;
        let table = &self.frozen.store.get(self.table).value;
        let pos = &self.frozen.store.get(self.pos).value;
        let mut rows = Vec::with_capacity(ids.len() * h);
        for (i, &id) in ids.iter().enumerate() {
            let t = &table.data()[id * h..(id + 1) * h];
            let p = &pos.data()[i * h..(i + 1) * h];
            rows.extend(t.iter().zip(p).map(|(a, b)| a + b));
        }
        let mut g = Graph::new();
        let p = self.frozen.store.bind(&mut g);
        let mut x = g.constant(Tensor::new(&[ids.len(), h], rows)?);
        for layer in &self.layers {
            x = layer.forward(&mut g, &p, x)?;
        }
        let pooled = g.mean_rows(x)?;
        let normed = self.final_norm.forward(&mut g, &p, pooled)?;
        let out = self.proj.forward(&mut g, &p, normed)?;
        Ok(g.value(out).clone())
    }
}

/// The three frozen encoders built from one seed.
#[derive(Debug, Clone)]
pub struct EncoderSet {
    pub image: ImageEncoder,
    pub vlm: VlmEncoder,
    pub text: TextEncoder,
}

impl EncoderSet {
    pub fn new(dims: &DimConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            image: ImageEncoder::new(dims, seed)?,
            vlm: VlmEncoder::new(dims, seed)?,
            text: TextEncoder::new(dims, seed)?,
        })
    }

    pub fn frozen(&self) -> [&FrozenEncoder; 3] {
        [&self.image.frozen, &self.vlm.frozen, &self.text.frozen]
    }

    pub fn checksums(&self) -> [[u8; 32]; 3] {
        self.frozen().map(FrozenEncoder::checksum)
    }
}
