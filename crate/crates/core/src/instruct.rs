//! Zero-shot instruction generation: the prompt template, the trainable
//! vision-to-language projection and the pluggable language-model backend.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{TextEncoder, VlmEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, DimConfig, Mlp};
use crate::params::{Bound, ParamStore};
use crate::synth::resize_nearest;
use crate::tensor::Tensor;

pub const SYSTEM_ROLE: &str = "You are a helpful healthcare virtual assistant.";
pub const DIGEST_LEN: usize = 8;

/// The per-modality analysis prompt.
pub fn render_prompt(instance: &str, modality: &str) -> Result<String> {
    if instance.is_empty() || modality.is_empty() {
        return Err(Error::Input("instance and modality must be non-empty".into()));
    }
    Ok(format!(
        "Please analyze the given {instance} {modality} image and give as much important \
         information in such a {modality} for segmenting {instance} as you can."
    ))
}

/// Two-layer projection from the vision-language embedding into the
/// language-model input space.
#[derive(Debug, Clone)]
pub struct VlmProjection {
    pub mlp: Mlp,
}

impl VlmProjection {
    pub const PREFIX: &'static str = "vlm_projection";

    pub fn new(b: &mut Builder, dims: &DimConfig) -> Self {
        Self::named(b, Self::PREFIX, dims)
    }

    /// Same layers under a custom name (which should start with [`Self::PREFIX`]).
    pub fn named(b: &mut Builder, name: &str, dims: &DimConfig) -> Self {
        Self {
            mlp: Mlp::new(b, name, &[dims.text_dim, dims.llm_dim, dims.llm_dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        let s = g.shape(v);
        let expected = self.mlp.layers[0].fan_in;
        if s.len() != 2 || s[1] != expected {
            return Err(Error::Dimension {
                op: "project_vlm",
                lhs: s.to_vec(),
                rhs: alloc::vec![1, expected],
            });
        }
        self.mlp.forward(g, p, v)
    }

    /// Eager evaluation with the current weights.
    pub fn project(&self, store: &ParamStore, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(v.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

/// Summary of a projected image embedding that fits in a text prompt:
/// the means of `DIGEST_LEN` contiguous chunks.
pub fn embedding_digest(projected: &Tensor) -> [f64; DIGEST_LEN] {
    let d = projected.data();
    let mut out = [0.0; DIGEST_LEN];
    let chunk = d.len().div_ceil(DIGEST_LEN).max(1);
    for (k, slot) in out.iter_mut().enumerate() {
        let part = &d[(k * chunk).min(d.len())..((k + 1) * chunk).min(d.len())];
        if !part.is_empty() {
            *slot = part.iter().sum::<f64>() / part.len() as f64;
        }
    }
    out
}

pub fn render_digest(digest: &[f64; DIGEST_LEN]) -> String {
    let mut s = String::from("[IMG");
    for v in digest {
        s.push_str(&format!(" {v:.4}"));
    }
    s.push(']');
    s
}

/// The user turn sent to a chat model.
pub fn doctor_message(digest: &[f64; DIGEST_LEN], prompt: &str) -> String {
    format!("###Doctor: {} {} ###Assistant:", render_digest(digest), prompt)
}

/// Intensity statistics verbalized by the offline backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStats {
    pub mean: f64,
    pub contrast: f64,
    pub edge_density: f64,
}

/// Forward differences above this magnitude count as edges.
pub const EDGE_THRESHOLD: f64 = 0.1;

impl ImageStats {
    /// Mean, population standard deviation and the fraction of pixels whose
    /// forward-difference gradient magnitude exceeds [`EDGE_THRESHOLD`].
    pub fn of(image: &Tensor) -> Self {
        let s = image.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let d = image.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut edges = 0usize;
        for i in 0..h {
            for j in 0..w {
                let v = d[i * w + j];
                let dx = if j + 1 < w { d[i * w + j + 1] - v } else { 0.0 };
                let dy = if i + 1 < h { d[(i + 1) * w + j] - v } else { 0.0 };
                if libm::sqrt(dx * dx + dy * dy) > EDGE_THRESHOLD {
                    edges += 1;
                }
            }
        }
        Self {
            mean,
            contrast: libm::sqrt(var),
            edge_density: edges as f64 / n,
        }
    }
}

/// Everything a backend may use to produce an instruction.
#[derive(Debug, Clone)]
pub struct LlmRequest {
    pub instance: String,
    pub modality: String,
    pub prompt: String,
    pub digest: [f64; DIGEST_LEN],
    pub stats: ImageStats,
}

impl LlmRequest {
    pub fn system(&self) -> &'static str {
        SYSTEM_ROLE
    }

    pub fn user_message(&self) -> String {
        doctor_message(&self.digest, &self.prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Stub,
    Remote,
}

/// Reversible text tokenization exposed by backends that own their tokenizer.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn detokenize(&self, tokens: &[u32]) -> String;
}

/// A frozen language model. Holds no trainable parameters.
pub trait LlmBackend {
    fn kind(&self) -> BackendKind;

    /// Produces the instruction text; never returns empty text as success.
    fn generate(&self, request: &LlmRequest) -> Result<String>;

    /// Token-level access, when the backend exposes it.
    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        None
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn generate(&self, request: &LlmRequest) -> Result<String> {
        (**self).generate(request)
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        (**self).tokenizer()
    }
}

/// Byte-level tokenizer: one token per UTF-8 byte, words separated by
/// [`ByteTokenizer::SEPARATOR`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const SEPARATOR: u32 = 256;
}

impl Tokenizer for ByteTokenizer {
    fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 {
                out.push(Self::SEPARATOR);
            }
            out.extend(word.bytes().map(u32::from));
        }
        out
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .map(|&t| if t == Self::SEPARATOR { b' ' } else { t as u8 })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Deterministic offline backend that verbalizes image statistics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend {
    pub seed: u64,
    tokenizer: ByteTokenizer,
}

impl StubBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, tokenizer: ByteTokenizer }
    }
}

impl LlmBackend for StubBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Stub
    }

    fn generate(&self, r: &LlmRequest) -> Result<String> {
        let ImageStats { mean, contrast, edge_density } = r.stats;
        Ok(format!(
            "Analysis of {m} for {i}: mean intensity {mean:.3}, contrast {contrast:.3}, \
             edge density {edge_density:.3}; prioritize high-gradient boundary regions for {i} segmentation.",
            m = r.modality,
            i = r.instance,
        ))
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        Some(&self.tokenizer)
    }
}

/// `detokenize(tokenize(text))` through the backend's own tokenizer.
pub fn tokenize_detokenize_roundtrip(text: &str, backend: &dyn LlmBackend) -> Result<String> {
    if text.trim().is_empty() {
        return Err(Error::Input("text is empty".into()));
    }
    let tok = backend
        .tokenizer()
        .ok_or_else(|| Error::Usage("backend does not expose a token stream".into()))?;
    Ok(tok.detokenize(&tok.tokenize(text)))
}

/// Generated text for one modality image, plus its encoded embedding.
#[derive(Debug, Clone)]
pub struct InstructionRecord {
    pub modality: String,
    pub prompt: String,
    pub instruction_text: String,
    /// `1 × H_text` from the instruction encoder.
    pub embedding: Tensor,
    /// Pooled vision-language embedding the instruction was conditioned on.
    pub vlm_embedding: Tensor,
}

/// Runs image → vision-language encoder → projection → backend → text
/// encoder for one modality image.
pub struct InstructionGenerator<'a> {
    pub vlm: &'a VlmEncoder,
    pub text: &'a TextEncoder,
    pub projection: &'a VlmProjection,
    pub store: &'a ParamStore,
}

impl InstructionGenerator<'_> {
    pub fn generate(
        &self,
        image: &Tensor,
        instance: &str,
        modality: &str,
        backend: &dyn LlmBackend,
    ) -> Result<InstructionRecord> {
        let prompt = render_prompt(instance, modality)?;
        let side = self.vlm.frozen.dims.vlm_size;
        let small = resize_nearest(image, side)?;
        let vlm_embedding = self.vlm.encode(&small)?;
        let projected = self.projection.project(self.store, &vlm_embedding)?;
        let request = LlmRequest {
            instance: instance.into(),
            modality: modality.into(),
            prompt: prompt.clone(),
            digest: embedding_digest(&projected),
            stats: ImageStats::of(&small),
        };
        let instruction_text = backend.generate(&request)?;
        if instruction_text.trim().is_empty() {
            return Err(Error::Backend {
                attempts: 1,
                message: "empty completion".into(),
            });
        }
        let embedding = self.text.encode(&instruction_text)?;
        Ok(InstructionRecord {
            modality: modality.into(),
            prompt,
            instruction_text,
            embedding,
            vlm_embedding,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::nn::WeightInit;

    #[test]
    fn prompt_template_is_exact() {
        assert_eq!(
            render_prompt("liver", "MRI-T2").unwrap(),
            "Please analyze the given liver MRI-T2 image and give as much important information \
             in such a MRI-T2 for segmenting liver as you can."
        );
        let p = render_prompt("prostate", "MRI-ADC").unwrap();
        assert_eq!(p.matches("MRI-ADC").count(), 2);
        assert_eq!(p.matches("prostate").count(), 2);
        assert!(render_prompt("", "CT").is_err());
        assert!(render_prompt("liver", "").is_err());
    }

    #[test]
    fn projection_shape_count_and_zero() {
        let dims = DimConfig::default();
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let proj = VlmProjection::new(
            &mut Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true },
            &dims,
        );
        let (h, l) = (dims.text_dim, dims.llm_dim);
        assert_eq!(proj.param_count(), h * l + l + l * l + l);
        assert_eq!(store.count_trainable(), proj.param_count());
        let y = proj.project(&store, &Tensor::ones(&[1, h])).unwrap();
        assert_eq!(y.shape(), &[1, l]);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y = proj.project(&store, &Tensor::ones(&[1, h])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(proj.project(&store, &Tensor::ones(&[1, h + 1])).is_err());
    }

    #[test]
    fn stub_is_deterministic_and_reports_stats() {
        let stub = StubBackend::new(1);
        let req = |img: &Tensor| LlmRequest {
            instance: "liver".into(),
            modality: "T1".into(),
            prompt: render_prompt("liver", "T1").unwrap(),
            digest: [0.0; DIGEST_LEN],
            stats: ImageStats::of(img),
        };
        let zero = Tensor::zeros(&[8, 8]);
        let text = stub.generate(&req(&zero)).unwrap();
        assert_eq!(text, stub.generate(&req(&zero)).unwrap());
        assert!(text.contains("mean intensity 0.000"));
        assert!(text.contains("contrast 0.000"));
        let half = Tensor::from_fn(&[8, 8], |i| if i < 32 { 0.0 } else { 1.0 });
        assert!(stub.generate(&req(&half)).unwrap().contains("mean intensity 0.500"));
    }

    #[test]
    fn roundtrip_normalizes_whitespace() {
        let stub = StubBackend::new(0);
        assert_eq!(tokenize_detokenize_roundtrip("segment the liver", &stub).unwrap(), "segment the liver");
        assert_eq!(tokenize_detokenize_roundtrip("a  b", &stub).unwrap(), "a b");
        assert!(tokenize_detokenize_roundtrip("", &stub).is_err());
    }

    #[test]
    fn doctor_message_layout() {
        let m = doctor_message(&[0.5; DIGEST_LEN], "Q?");
        assert!(m.starts_with("###Doctor: [IMG 0.5000 "));
        assert!(m.ends_with("] Q? ###Assistant:"));
        assert_eq!(render_digest(&[0.0; DIGEST_LEN]).matches(' ').count(), DIGEST_LEN);
    }

    #[test]
    fn digest_chunks_means() {
        let t = Tensor::from_fn(&[1, 16], |i| i as f64);
        assert_eq!(embedding_digest(&t), [0.5, 2.5, 4.5, 6.5, 8.5, 10.5, 12.5, 14.5]);
    }
}
