//! Building blocks shared by the encoders and the mask decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Widths and resolutions of the whole pipeline.
///
/// The defaults are a 1/4-scale analog of a 1024 px / 64-grid / 256 px mask
/// setup: the image grid is `img_size / patch` and the mask side is four
/// times the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimConfig {
    pub img_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub prompt_dim: usize,
    pub heads: usize,
    pub depth_enc: usize,
    pub mask_size: usize,
    /// Input side of the vision-language encoder.
    pub vlm_size: usize,
    /// Width of the language-model input space.
    pub llm_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for DimConfig {
    fn default() -> Self {
        Self {
            img_size: 256,
            patch: 16,
            embed_dim: 32,
            text_dim: 64,
            prompt_dim: 32,
            heads: 4,
            depth_enc: 2,
            mask_size: 64,
            vlm_size: 64,
            llm_dim: 64,
            vocab_size: 4096,
            max_tokens: 128,
        }
    }
}

impl DimConfig {
    /// Default widths at another image resolution, keeping the 4:1 ratios.
    pub fn for_image(img_size: usize, patch: usize) -> Self {
        let grid = img_size / patch;
        Self {
            img_size,
            patch,
            mask_size: 4 * grid,
            vlm_size: (img_size / 4).max(patch),
            ..Self::default()
        }
    }

    /// A tiny configuration for exhaustive gradient checks (4×4 grid).
    pub fn micro() -> Self {
        Self {
            img_size: 16,
            patch: 4,
            embed_dim: 8,
            text_dim: 16,
            prompt_dim: 8,
            heads: 2,
            depth_enc: 1,
            mask_size: 16,
            vlm_size: 8,
            llm_dim: 16,
            vocab_size: 64,
            max_tokens: 32,
        }
    }

    /// Side of the image-embedding grid.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch
    }

    /// Side of the decoder output before any final resize.
    pub fn decoder_side(&self) -> usize {
        4 * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || self.img_size == 0 || self.img_size % self.patch != 0 {
            return fail(format!("img_size {} not divisible by patch {}", self.img_size, self.patch));
        }
        if self.vlm_size == 0 || self.vlm_size % self.patch != 0 {
            return fail(format!("vlm_size {} not divisible by patch {}", self.vlm_size, self.patch));
        }
        if self.prompt_dim != self.embed_dim {
            return fail(format!(
                "prompt_dim {} must equal embed_dim {}",
                self.prompt_dim, self.embed_dim
            ));
        }
        if self.text_dim != 2 * self.prompt_dim {
            return fail(format!(
                "text_dim {} must be twice prompt_dim {}",
                self.text_dim, self.prompt_dim
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 || self.text_dim % self.heads != 0 {
            return fail(format!("widths must be divisible by {} heads", self.heads));
        }
        if self.embed_dim % 4 != 0 {
            return fail(format!("embed_dim {} must be divisible by 4", self.embed_dim));
        }
        if self.mask_size == 0 || self.vocab_size == 0 || self.max_tokens == 0 || self.llm_dim == 0 {
            return fail("mask_size, vocab_size, max_tokens and llm_dim must be positive".into());
        }
        Ok(())
    }
}

/// `y = x·W + b` with `W[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// How a freshly built layer draws its weights.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// Truncated normal, zero biases (simulated pretrained weights).
    TruncNormal(f64),
    /// Uniform ±1/√fan_in for weights and biases.
    FanIn,
}

impl WeightInit {
    fn draw(self, init: &mut Init, shape: &[usize], fan_in: usize) -> Tensor {
        match self {
            WeightInit::TruncNormal(std) => init.trunc_normal(shape, std),
            WeightInit::FanIn => init.uniform(shape, 1.0 / libm::sqrt(fan_in as f64)),
        }
    }

    fn bias(self, init: &mut Init, shape: &[usize], fan_in: usize) -> Tensor {
        match self {
            WeightInit::TruncNormal(_) => Tensor::zeros(shape),
            WeightInit::FanIn => init.uniform(shape, 1.0 / libm::sqrt(fan_in as f64)),
        }
    }
}

/// Everything a constructor needs to register parameters.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: &'a mut Init,
    pub scheme: WeightInit,
    pub trainable: bool,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(name, value, self.trainable)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.scheme.draw(self.init, shape, fan_in);
        self.param(name, t)
    }

    pub fn bias(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.scheme.bias(self.init, shape, fan_in);
        self.param(name, t)
    }
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = b.weight(&format!("{name}.weight"), &[fan_in, fan_out], fan_in);
        let bias = bias.then(|| b.bias(&format!("{name}.bias"), &[fan_out], fan_in));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, width: usize) -> Self {
        Self {
            gamma: b.param(&format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: b.param(&format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }

    /// Normalizes a `C×H×W` map over its channel axis at every pixel.
    pub fn forward_channels(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = shape[0];
        let hw: usize = shape[1..].iter().product();
        let flat = g.reshape(x, &[c, hw])?;
        let rows = g.transpose(flat)?;
        let normed = self.forward(g, p, rows)?;
        let back = g.transpose(normed)?;
        g.reshape(back, &shape)
    }
}

/// Dense stack with GELU between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(b, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(b, &format!("{name}.q"), width, width, true),
            k: Linear::new(b, &format!("{name}.k"), width, width, true),
            v: Linear::new(b, &format!("{name}.v"), width, width, true),
            out: Linear::new(b, &format!("{name}.out"), width, width, true),
            heads,
            width,
        }
    }

    /// `softmax(QKᵀ/√d_head)·V` per head, concatenated and output-projected.
    pub fn forward(&self, g: &mut Graph, p: &Bound, q_src: Var, kv_src: Var) -> Result<Var> {
        for (src, name) in [(q_src, "query"), (kv_src, "key/value")] {
            let s = g.shape(src);
            if s.len() != 2 || s[1] != self.width {
                return Err(Error::Shape {
                    op: "attention",
                    detail: format!("{name} tokens {:?} do not have width {}", s, self.width),
                });
            }
        }
        let nq = g.shape(q_src)[0];
        let nk = g.shape(kv_src)[0];
        let v = self.v.forward(g, p, kv_src)?;
        let mixed = if nk == 1 {
            // A single key gets softmax weight exactly 1 (and no gradient
            // reaches Q or K), so every query receives the value row.
            let zeros = g.constant(Tensor::zeros(&[nq, self.width]));
            g.add_row(zeros, v)?
        } else {
            let q = self.q.forward(g, p, q_src)?;
            let k = self.k.forward(g, p, kv_src)?;
            let dh = self.width / self.heads;
            let scale = 1.0 / libm::sqrt(dh as f64);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let logits = g.matmul(qh, kt)?;
                let logits = g.scale(logits, scale);
                let weights = g.softmax(logits, 1)?;
                heads.push(g.matmul(weights, vh)?);
            }
            if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            }
        };
        self.out.forward(g, p, mixed)
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.out.param_count()
    }
}

/// Pre-norm transformer layer: `x + attn(LN x)`, then `x + mlp(LN x)`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), width),
            attn: Attention::new(b, &format!("{name}.attn"), width, heads),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), width),
            mlp: Mlp::new(b, &format!("{name}.mlp"), &[width, 2 * width, width]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(x, m)
    }
}

/// Non-overlapping patch projection plus a learned positional table.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: ParamId,
    pub bias: ParamId,
    pub pos: ParamId,
    pub patch: usize,
    pub in_chans: usize,
    pub width: usize,
    pub side: usize,
}

impl PatchEmbed {
    pub fn new(b: &mut Builder, name: &str, in_chans: usize, side: usize, patch: usize, width: usize) -> Self {
        let grid = side / patch;
        let fan_in = in_chans * patch * patch;
        Self {
            proj: b.weight(&format!("{name}.proj"), &[width, in_chans, patch, patch], fan_in),
            bias: b.bias(&format!("{name}.bias"), &[width], fan_in),
            pos: b.weight(&format!("{name}.pos"), &[grid * grid, width], width),
            patch,
            in_chans,
            width,
            side,
        }
    }

    /// `image[C_in, S, S]` to `tokens[(S/patch)², width]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != self.in_chans || s[1] != s[2] {
            return Err(Error::Shape {
                op: "patch_embed",
                detail: format!("expected {}×S×S image, got {:?}", self.in_chans, s),
            });
        }
        if s[1] % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch {}",
                s[1], self.patch
            )));
        }
        if s[1] != self.side {
            return Err(Error::ResizeRequired { expected: self.side, got: s });
        }
        let grid = s[1] / self.patch;
        let fmap = g.conv2d(image, p[self.proj], self.patch, 0)?;
        let fmap = g.add_channel(fmap, p[self.bias])?;
        let flat = g.reshape(fmap, &[self.width, grid * grid])?;
        let tokens = g.transpose(flat)?;
        g.add(tokens, p[self.pos])
    }
}

/// One round of text/image mixing for the mask decoder.
///
/// Stage order: text self-attention, text→image cross-attention, one-layer
/// MLP on the text, image→text cross-attention. Each stage is a pre-norm
/// residual update.
#[derive(Debug, Clone)]
pub struct TwoWayBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_t2i_text: LayerNorm,
    pub norm_t2i_image: LayerNorm,
    pub text_to_image: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Linear,
    pub norm_i2t_image: LayerNorm,
    pub norm_i2t_text: LayerNorm,
    pub image_to_text: Attention,
}

impl TwoWayBlock {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize) -> Self {
        Self {
            norm_self: LayerNorm::new(b, &format!("{name}.norm_self"), width),
            self_attn: Attention::new(b, &format!("{name}.self_attn"), width, heads),
            norm_t2i_text: LayerNorm::new(b, &format!("{name}.norm_t2i_text"), width),
            norm_t2i_image: LayerNorm::new(b, &format!("{name}.norm_t2i_image"), width),
            text_to_image: Attention::new(b, &format!("{name}.text_to_image"), width, heads),
            norm_mlp: LayerNorm::new(b, &format!("{name}.norm_mlp"), width),
            mlp: Linear::new(b, &format!("{name}.mlp"), width, width, true),
            norm_i2t_image: LayerNorm::new(b, &format!("{name}.norm_i2t_image"), width),
            norm_i2t_text: LayerNorm::new(b, &format!("{name}.norm_i2t_text"), width),
            image_to_text: Attention::new(b, &format!("{name}.image_to_text"), width, heads),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, text: Var, image: Var) -> Result<(Var, Var)> {
        let h = self.norm_self.forward(g, p, text)?;
        let a = self.self_attn.forward(g, p, h, h)?;
        let text = g.add(text, a)?;

        let q = self.norm_t2i_text.forward(g, p, text)?;
        let kv = self.norm_t2i_image.forward(g, p, image)?;
        let a = self.text_to_image.forward(g, p, q, kv)?;
        let text = g.add(text, a)?;

        let h = self.norm_mlp.forward(g, p, text)?;
        let h = self.mlp.forward(g, p, h)?;
        let h = g.gelu(h);
        let text = g.add(text, h)?;

        let q = self.norm_i2t_image.forward(g, p, image)?;
        let kv = self.norm_i2t_text.forward(g, p, text)?;
        let a = self.image_to_text.forward(g, p, q, kv)?;
        let image = g.add(image, a)?;
        Ok((text, image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn builder<'a>(store: &'a mut ParamStore, init: &'a mut Init) -> Builder<'a> {
        Builder { store, init, scheme: WeightInit::FanIn, trainable: true }
    }

    #[test]
    fn default_dims_are_valid() {
        let d = DimConfig::default();
        d.validate().unwrap();
        assert_eq!(d.grid(), 16);
        assert_eq!(d.decoder_side(), d.mask_size);
        DimConfig::micro().validate().unwrap();
    }

    #[test]
    fn dims_reject_bad_ratios() {
        let d = DimConfig { text_dim: 48, ..DimConfig::default() };
        assert!(d.validate().is_err());
        let d = DimConfig { img_size: 250, ..DimConfig::default() };
        assert!(d.validate().is_err());
        let d = DimConfig { prompt_dim: 16, text_dim: 32, ..DimConfig::default() };
        assert!(d.validate().is_err());
    }

    #[test]
    fn patch_embed_token_counts() {
        for (side, tokens) in [(256, 256), (64, 16)] {
            let mut store = ParamStore::new();
            let mut init = Init::new(1);
            let pe = PatchEmbed::new(&mut builder(&mut store, &mut init), "pe", 1, side, 16, 8);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(Tensor::zeros(&[1, side, side]));
            let y = pe.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[tokens, 8]);
        }
    }

    #[test]
    fn patch_embed_zero_image_zero_table() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let pe = PatchEmbed::new(&mut builder(&mut store, &mut init), "pe", 1, 32, 16, 4);
        for id in [pe.bias, pe.pos] {
            let z = Tensor::zeros(store.get(id).value.shape());
            store.get_mut(id).value = z;
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 32, 32]));
        let y = pe.forward(&mut g, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_indivisible_side() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let pe = PatchEmbed::new(&mut builder(&mut store, &mut init), "pe", 1, 32, 16, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 30, 30]));
        assert!(matches!(pe.forward(&mut g, &p, x), Err(Error::Config(_))));
    }

    #[test]
    fn attention_width_mismatch() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let attn = Attention::new(&mut builder(&mut store, &mut init), "a", 4, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let q = g.constant(Tensor::zeros(&[1, 4]));
        let kv = g.constant(Tensor::zeros(&[3, 5]));
        assert!(attn.forward(&mut g, &p, q, kv).is_err());
    }

    #[test]
    fn transformer_layer_gradients() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let layer = TransformerLayer::new(&mut builder(&mut store, &mut init), "t", 4, 2);
        let x = Init::new(9).uniform(&[3, 4], 1.0);
        let r = finite_diff_check(
            |g, x| {
                let p = store.bind(g);
                let y = layer.forward(g, &p, x)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }
}
