//! Trainable prediction head: the prompt aligner and the two-way mask decoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, Builder, DimConfig, LayerNorm, Mlp, TwoWayBlock};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Two dense layers mapping an instruction embedding to one sparse-prompt token.
#[derive(Debug, Clone)]
pub struct DimensionAligner {
    pub mlp: Mlp,
}

impl DimensionAligner {
    pub const PREFIX: &'static str = "dimension_aligner";

    /// `in_width → D_p → D_p`.
    pub fn new(b: &mut Builder, in_width: usize, dims: &DimConfig) -> Self {
        Self::named(b, Self::PREFIX, in_width, dims)
    }

    pub fn named(b: &mut Builder, name: &str, in_width: usize, dims: &DimConfig) -> Self {
        Self {
            mlp: Mlp::new(b, name, &[in_width, dims.prompt_dim, dims.prompt_dim]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.mlp.layers[0].fan_in
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, e: Var) -> Result<Var> {
        let s = g.shape(e);
        if s.len() != 2 || s[0] != 1 || s[1] != self.in_width() {
            return Err(Error::Dimension {
                op: "align_prompt",
                lhs: s.to_vec(),
                rhs: vec![1, self.in_width()],
            });
        }
        self.mlp.forward(g, p, e)
    }

    pub fn align(&self, store: &ParamStore, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(e.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

/// The decoder accepts exactly one prompt token of width `D_p`.
pub fn prompt_shape_contract(shape: &[usize], dims: &DimConfig) -> Result<()> {
    if shape == [1, dims.prompt_dim] {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "sparse prompt must be 1×{}, got {:?}",
            dims.prompt_dim, shape
        )))
    }
}

/// Two-way transformer decoder with a ×4 transposed-convolution upsampler
/// and a hypernetwork MLP that turns the text token into per-pixel weights.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub dims: DimConfig,
    pub blocks: Vec<TwoWayBlock>,
    pub final_norm_text: LayerNorm,
    pub final_norm_image: LayerNorm,
    pub final_attn: Attention,
    pub final_norm: LayerNorm,
    pub up1: ParamId,
    pub up1_bias: ParamId,
    pub up_norm: LayerNorm,
    pub up2: ParamId,
    pub up2_bias: ParamId,
    pub hyper: Mlp,
}

impl MaskDecoder {
    pub const PREFIX: &'static str = "mask_decoder";
    pub const DEPTH: usize = 2;

    pub fn new(b: &mut Builder, dims: &DimConfig) -> Self {
        Self::named(b, Self::PREFIX, dims)
    }

    pub fn named(b: &mut Builder, name: &str, dims: &DimConfig) -> Self {
        let c = dims.embed_dim;
        let n = |s: &str| format!("{name}.{s}");
        let blocks = (0..Self::DEPTH)
            .map(|i| TwoWayBlock::new(b, &n(&format!("block{i}")), c, dims.heads))
            .collect();
        Self {
            dims: *dims,
            blocks,
            final_norm_text: LayerNorm::new(b, &n("final_norm_text"), c),
            final_norm_image: LayerNorm::new(b, &n("final_norm_image"), c),
            final_attn: Attention::new(b, &n("final_attn"), c, dims.heads),
            final_norm: LayerNorm::new(b, &n("final_norm"), c),
            up1: b.weight(&n("up1.weight"), &[c, c / 2, 2, 2], c),
            up1_bias: b.bias(&n("up1.bias"), &[c / 2], c),
            up_norm: LayerNorm::new(b, &n("up_norm"), c / 2),
            up2: b.weight(&n("up2.weight"), &[c / 2, c / 4, 2, 2], c / 2),
            up2_bias: b.bias(&n("up2.bias"), &[c / 4], c / 2),
            hyper: Mlp::new(b, &n("hyper"), &[c, c, c, c / 4]),
        }
    }

    /// Image embedding `[C, G, G]` and prompt `[1, D_p]` to a logit map
    /// `[mask_size, mask_size]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, embedding: Var, prompt: Var) -> Result<Var> {
        let d = &self.dims;
        let (c, grid) = (d.embed_dim, d.grid());
        prompt_shape_contract(g.shape(prompt), d)?;
        if g.shape(embedding) != [c, grid, grid] {
            return Err(Error::Dimension {
                op: "decode_mask: image embedding",
                lhs: g.shape(embedding).to_vec(),
                rhs: vec![c, grid, grid],
            });
        }
        let flat = g.reshape(embedding, &[c, grid * grid])?;
        let mut image = g.transpose(flat)?;
        let mut text = prompt;
        for block in &self.blocks {
            (text, image) = block.forward(g, p, text, image)?;
        }
        let q = self.final_norm_text.forward(g, p, text)?;
        let kv = self.final_norm_image.forward(g, p, image)?;
        let a = self.final_attn.forward(g, p, q, kv)?;
        let text = g.add(text, a)?;
        let text = self.final_norm.forward(g, p, text)?;

        let chw = g.transpose(image)?;
        let chw = g.reshape(chw, &[c, grid, grid])?;
        let up = g.conv_transpose2d(chw, p[self.up1], 2, 0)?;
        let up = g.add_channel(up, p[self.up1_bias])?;
        let up = self.up_norm.forward_channels(g, p, up)?;
        let up = g.gelu(up);
        let up = g.conv_transpose2d(up, p[self.up2], 2, 0)?;
        let up = g.add_channel(up, p[self.up2_bias])?;
        let up = g.gelu(up);

        let side = 4 * grid;
        let weights = self.hyper.forward(g, p, text)?;
        let feat = g.reshape(up, &[c / 4, side * side])?;
        let logits = g.matmul(weights, feat)?;
        let logits = g.reshape(logits, &[side, side])?;
        if d.mask_size == side {
            Ok(logits)
        } else {
            resize_bilinear(g, logits, d.mask_size)
        }
    }

}

/// Row-interpolation matrix `[target, src]` for half-pixel-centred bilinear sampling.
pub fn bilinear_matrix(src: usize, target: usize) -> Tensor {
    let mut m = Tensor::zeros(&[target, src]);
    let scale = src as f64 / target as f64;
    for i in 0..target {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let x0 = libm::floor(x) as usize;
        let x1 = (x0 + 1).min(src - 1);
        let t = x - x0 as f64;
        let d = m.data_mut();
        d[i * src + x0] += 1.0 - t;
        d[i * src + x1] += t;
    }
    m
}

/// Bilinear resize of a square `[S, S]` map as `R · X · Rᵀ`.
pub fn resize_bilinear(g: &mut Graph, x: Var, target: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape {
            op: "resize_bilinear",
            detail: format!("expected a square map, got {:?}", s),
        });
    }
    let r = bilinear_matrix(s[0], target);
    let rt = r.transpose2d()?;
    let r = g.constant(r);
    let rt = g.constant(rt);
    let rows = g.matmul(r, x)?;
    g.matmul(rows, rt)
}

/// Eager decode with the current weights.
pub fn decode_mask(decoder: &MaskDecoder, store: &ParamStore, embedding: &Tensor, prompt: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let e = g.constant(embedding.clone());
    let q = g.constant(prompt.clone());
    let y = decoder.forward(&mut g, &p, e, q)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::WeightInit;
    use crate::params::Init;

    fn build(dims: &DimConfig) -> (ParamStore, DimensionAligner, MaskDecoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let mut b = Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true };
        let al = DimensionAligner::new(&mut b, dims.text_dim, dims);
        let dec = MaskDecoder::new(&mut b, dims);
        (store, al, dec)
    }

    #[test]
    fn aligner_halves_width() {
        let dims = DimConfig::default();
        let (store, al, _) = build(&dims);
        let y = al.align(&store, &Tensor::ones(&[1, 64])).unwrap();
        assert_eq!(y.shape(), &[1, 32]);
        assert!(matches!(al.align(&store, &Tensor::ones(&[1, 63])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn decoder_output_is_four_times_grid() {
        let dims = DimConfig::micro();
        let (store, _, dec) = build(&dims);
        let e = Tensor::from_fn(&[8, 4, 4], |i| libm::sin(i as f64 * 0.37));
        let p = Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1);
        let y = decode_mask(&dec, &store, &e, &p).unwrap();
        assert_eq!(y.shape(), &[16, 16]);
        assert_eq!(y, decode_mask(&dec, &store, &e, &p).unwrap());
    }

    #[test]
    fn contract_rejects_wrong_prompts() {
        let dims = DimConfig::default();
        assert!(prompt_shape_contract(&[1, 32], &dims).is_ok());
        assert!(matches!(prompt_shape_contract(&[2, 32], &dims), Err(Error::Contract(_))));
        assert!(matches!(prompt_shape_contract(&[1, 64], &dims), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_hyper_output_gives_zero_logits() {
        let dims = DimConfig::micro();
        let (mut store, _, dec) = build(&dims);
        let last = dec.hyper.layers.last().unwrap();
        for id in [last.weight, last.bias.unwrap()] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let e = Tensor::from_fn(&[8, 4, 4], |i| i as f64 * 0.01);
        let y = decode_mask(&dec, &store, &e, &Tensor::ones(&[1, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity() {
        let m = bilinear_matrix(16, 24);
        for i in 0..24 {
            let s: f64 = m.data()[i * 16..(i + 1) * 16].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(bilinear_matrix(5, 5), Tensor::eye(5));
    }

    #[test]
    fn mask_size_differs_from_decoder_side() {
        let dims = DimConfig { mask_size: 20, ..DimConfig::micro() };
        let (store, _, dec) = build(&dims);
        let y = decode_mask(&dec, &store, &Tensor::zeros(&[8, 4, 4]), &Tensor::ones(&[1, 8])).unwrap();
        assert_eq!(y.shape(), &[20, 20]);
    }
}
