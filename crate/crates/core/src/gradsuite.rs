//! Finite-difference checks over every differentiable op and over the full
//! model-plus-loss composition.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::gradcheck::{compare_gradients, finite_diff_check};
use crate::graph::{Graph, Var};
use crate::loss::{bce_loss, dice_loss, segmentation_loss, LossConfig};
use crate::model::{InstructionWiring, ModalityFeatures, SegModel, ZeusConfig, ZeusModel};
use crate::fusion::FusionMode;
use crate::nn::{Attention, Builder, DimConfig, LayerNorm, WeightInit};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub h: f64,
    pub rel_tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seeds: 10, h: 1e-5, rel_tol: 1e-4 }
    }
}

type Unary = fn(&mut Graph, Var, &Tensor) -> Result<Var>;

/// Reduces any output to a scalar through fixed random weights so that
/// no output element's gradient cancels by symmetry.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone().reshape(g.shape(y))?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

struct Case {
    name: &'static str,
    shape: &'static [usize],
    /// Range inputs are drawn from.
    range: (f64, f64),
    /// Shape of the op output, used to size the projection weights.
    out: &'static [usize],
    f: Unary,
}

fn other(g: &mut Graph, shape: &[usize], aux: &Tensor) -> Var {
    let n: usize = shape.iter().product();
    let t = Tensor::new(shape, aux.data()[..n].to_vec()).expect("aux");
    g.constant(t)
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", shape: &[3, 4], range: (-2.0, 2.0), out: &[3, 4], f: |g, x, a| { let b = other(g, &[3, 4], a); g.add(x, b) } },
        Case { name: "sub", shape: &[3, 4], range: (-2.0, 2.0), out: &[3, 4], f: |g, x, a| { let b = other(g, &[3, 4], a); g.sub(b, x) } },
        Case { name: "mul", shape: &[3, 4], range: (-2.0, 2.0), out: &[3, 4], f: |g, x, a| { let b = other(g, &[3, 4], a); g.mul(x, b) } },
        Case { name: "div", shape: &[3, 4], range: (0.5, 2.0), out: &[3, 4], f: |g, x, a| { let b = other(g, &[3, 4], a); let y = g.div(b, x)?; g.div(y, x) } },
        Case { name: "scale", shape: &[5], range: (-2.0, 2.0), out: &[5], f: |g, x, _| Ok(g.scale(x, -1.7)) },
        Case { name: "add_scalar", shape: &[5], range: (-2.0, 2.0), out: &[5], f: |g, x, _| { let y = g.add_scalar(x, 0.3); g.mul(y, y) } },
        Case { name: "add_all", shape: &[2, 3], range: (-2.0, 2.0), out: &[2, 3], f: |g, x, a| { let b = other(g, &[2, 3], a); let s = g.add_all(&[x, b, x])?; g.mul(s, x) } },
        Case { name: "add_row", shape: &[4], range: (-2.0, 2.0), out: &[3, 4], f: |g, r, a| { let x = other(g, &[3, 4], a); let y = g.add_row(x, r)?; g.mul(y, y) } },
        Case { name: "add_channel", shape: &[3], range: (-2.0, 2.0), out: &[3, 2, 2], f: |g, b, a| { let x = other(g, &[3, 2, 2], a); let y = g.add_channel(x, b)?; g.mul(y, y) } },
        Case { name: "matmul", shape: &[3, 4], range: (-2.0, 2.0), out: &[3, 3], f: |g, x, _| { let t = g.transpose(x)?; g.matmul(x, t) } },
        Case { name: "transpose", shape: &[3, 5], range: (-2.0, 2.0), out: &[5, 3], f: |g, x, _| g.transpose(x) },
        Case { name: "reshape", shape: &[3, 4], range: (-2.0, 2.0), out: &[2, 6], f: |g, x, _| g.reshape(x, &[2, 6]) },
        Case { name: "softmax_rows", shape: &[3, 5], range: (-3.0, 3.0), out: &[3, 5], f: |g, x, _| g.softmax(x, 1) },
        Case { name: "softmax_cols", shape: &[3, 5], range: (-3.0, 3.0), out: &[3, 5], f: |g, x, _| g.softmax(x, 0) },
        Case { name: "layer_norm_x", shape: &[3, 6], range: (-2.0, 2.0), out: &[3, 6], f: |g, x, a| {
            let gamma = other(g, &[6], a);
            let beta = g.constant(Tensor::full(&[6], 0.1));
            g.layer_norm(x, gamma, beta, 1e-6)
        } },
        Case { name: "layer_norm_affine", shape: &[6], range: (-2.0, 2.0), out: &[3, 6], f: |g, gamma, a| {
            let x = other(g, &[3, 6], a);
            g.layer_norm(x, gamma, gamma, 1e-6)
        } },
        Case { name: "gelu", shape: &[8], range: (-3.0, 3.0), out: &[8], f: |g, x, _| Ok(g.gelu(x)) },
        Case { name: "sigmoid", shape: &[8], range: (-4.0, 4.0), out: &[8], f: |g, x, _| Ok(g.sigmoid(x)) },
        Case { name: "ln", shape: &[8], range: (0.2, 3.0), out: &[8], f: |g, x, _| g.ln(x) },
        Case { name: "clamp", shape: &[8], range: (-2.0, 2.0), out: &[8], f: |g, x, _| { let y = g.clamp(x, -1.0, 1.0); g.mul(y, x) } },
        Case { name: "sum", shape: &[2, 3], range: (-2.0, 2.0), out: &[1], f: |g, x, _| { let y = g.mul(x, x)?; Ok(g.sum(y)) } },
        Case { name: "mean", shape: &[2, 3], range: (-2.0, 2.0), out: &[1], f: |g, x, _| { let y = g.mul(x, x)?; Ok(g.mean(y)) } },
        Case { name: "mean_rows", shape: &[4, 3], range: (-2.0, 2.0), out: &[1, 3], f: |g, x, _| g.mean_rows(x) },
        Case { name: "slice_cols", shape: &[3, 6], range: (-2.0, 2.0), out: &[3, 2], f: |g, x, _| g.slice_cols(x, 3, 2) },
        Case { name: "concat_cols", shape: &[3, 2], range: (-2.0, 2.0), out: &[3, 7], f: |g, x, a| {
            let b = other(g, &[3, 3], a);
            g.concat_cols(&[x, b, x])
        } },
        Case { name: "conv2d_input", shape: &[2, 5, 5], range: (-1.0, 1.0), out: &[3, 3, 3], f: |g, x, a| {
            let w = other(g, &[3, 2, 3, 3], a);
            g.conv2d(x, w, 2, 1)
        } },
        Case { name: "conv2d_weight", shape: &[3, 2, 3, 3], range: (-1.0, 1.0), out: &[3, 5, 5], f: |g, w, a| {
            let x = other(g, &[2, 5, 5], a);
            g.conv2d(x, w, 1, 1)
        } },
        Case { name: "conv_transpose2d_input", shape: &[2, 3, 3], range: (-1.0, 1.0), out: &[3, 6, 6], f: |g, x, a| {
            let w = other(g, &[2, 3, 2, 2], a);
            g.conv_transpose2d(x, w, 2, 0)
        } },
        Case { name: "conv_transpose2d_weight", shape: &[2, 3, 3, 3], range: (-1.0, 1.0), out: &[3, 5, 5], f: |g, w, a| {
            let x = other(g, &[2, 3, 3], a);
            g.conv_transpose2d(x, w, 2, 1)
        } },
        Case { name: "dice_loss", shape: &[4, 4], range: (0.05, 0.95), out: &[1], f: |g, p, a| {
            let t = g.constant(Tensor::from_fn(&[4, 4], |i| (a.data()[i] > 0.0) as u8 as f64));
            dice_loss(g, p, t, 1.0)
        } },
        Case { name: "bce_loss", shape: &[4, 4], range: (0.05, 0.95), out: &[1], f: |g, p, a| {
            let t = g.constant(Tensor::from_fn(&[4, 4], |i| (a.data()[i] > 0.0) as u8 as f64));
            bce_loss(g, p, t)
        } },
        Case { name: "dice_bce_on_logits", shape: &[4, 4], range: (-3.0, 3.0), out: &[1], f: |g, z, a| {
            let t = g.constant(Tensor::from_fn(&[4, 4], |i| (a.data()[i] > 0.0) as u8 as f64));
            segmentation_loss(g, z, t, &LossConfig::default())
        } },
    ]
}

fn check_case(c: &Case, cfg: &SuiteConfig) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    let mut passed = true;
    for seed in 0..cfg.seeds {
        let mut init = Init::new(0xC0FFEE + seed as u64);
        let (lo, hi) = c.range;
        let x = init.uniform(c.shape, 1.0).map(|u| lo + (u + 1.0) * 0.5 * (hi - lo));
        let aux = init.uniform(&[64], 1.0).map(|u| if u.abs() < 0.2 { u + 0.5 } else { u });
        let weights = init.uniform(c.out, 1.0);
        let f = c.f;
        let r = finite_diff_check(
            |g, v| {
                let y = f(g, v, &aux)?;
                if g.shape(y).iter().product::<usize>() == 1 {
                    Ok(y)
                } else {
                    project(g, y, &weights)
                }
            },
            &x,
            cfg.h,
            cfg.rel_tol,
        )?;
        worst = worst.max(r.max_rel_error);
        passed &= r.passed;
    }
    Ok(OpCheck { name: c.name.into(), seeds: cfg.seeds, max_rel_error: worst, passed })
}

/// Multi-head attention wrt its query tokens, key tokens and one projection.
fn check_attention(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    let mut rows = Vec::new();
    for which in ["attention_query", "attention_keys", "attention_weight"] {
        let mut worst = 0.0f64;
        let mut passed = true;
        for seed in 0..cfg.seeds {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed as u64 + 17);
            let attn = Attention::new(
                &mut Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true },
                "attn",
                4,
                2,
            );
            let q0 = init.uniform(&[3, 4], 1.0);
            let k0 = init.uniform(&[5, 4], 1.0);
            let weights = init.uniform(&[3, 4], 1.0);
            let x = match which {
                "attention_query" => q0.clone(),
                "attention_keys" => k0.clone(),
                _ => store.get(attn.q.weight).value.clone(),
            };
            let r = finite_diff_check(
                |g, v| {
                    let (p, q, k) = match which {
                        "attention_query" => (store.bind(g), v, g.constant(k0.clone())),
                        "attention_keys" => (store.bind(g), g.constant(q0.clone()), v),
                        _ => {
                            let p = store.bind_with(g, attn.q.weight, v);
                            let q = g.constant(q0.clone());
                            let k = g.constant(k0.clone());
                            (p, q, k)
                        }
                    };
                    let y = attn.forward(g, &p, q, k)?;
                    project(g, y, &weights)
                },
                &x,
                cfg.h,
                cfg.rel_tol,
            )?;
            worst = worst.max(r.max_rel_error);
            passed &= r.passed;
        }
        rows.push(OpCheck { name: which.into(), seeds: cfg.seeds, max_rel_error: worst, passed });
    }
    Ok(rows)
}

/// Channel layer norm as used after the first upsampling stage.
fn check_channel_norm(cfg: &SuiteConfig) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    let mut passed = true;
    for seed in 0..cfg.seeds {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed as u64 + 99);
        let ln = LayerNorm::new(
            &mut Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true },
            "ln",
            3,
        );
        let x = init.uniform(&[3, 2, 2], 1.0);
        let weights = init.uniform(&[3, 2, 2], 1.0);
        let r = finite_diff_check(
            |g, v| {
                let p = store.bind(g);
                let y = ln.forward_channels(g, &p, v)?;
                project(g, y, &weights)
            },
            &x,
            cfg.h,
            cfg.rel_tol,
        )?;
        worst = worst.max(r.max_rel_error);
        passed &= r.passed;
    }
    Ok(OpCheck { name: "layer_norm_channels".into(), seeds: cfg.seeds, max_rel_error: worst, passed })
}

/// Random frozen-encoder-like inputs for a micro model.
pub fn micro_features(dims: &DimConfig, modalities: usize, seed: u64) -> Vec<ModalityFeatures> {
    let mut init = Init::new(seed);
    let g = dims.grid();
    (0..modalities)
        .map(|m| ModalityFeatures {
            modality: format!("m{m}"),
            embedding: init.uniform(&[dims.embed_dim, g, g], 1.0),
            instruction: init.uniform(&[1, dims.text_dim], 1.0),
            vlm: init.uniform(&[1, dims.text_dim], 1.0),
            instruction_text: String::new(),
        })
        .collect()
}

/// Checks every trainable tensor of a micro instruction-prompted model
/// through decode and the Dice+BCE objective. One row per wiring × fusion.
pub fn check_model(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    let dims = DimConfig { llm_dim: DimConfig::micro().text_dim, ..DimConfig::micro() };
    let mut rows = Vec::new();
    for (wiring, fusion) in [
        (InstructionWiring::Text, FusionMode::Late),
        (InstructionWiring::Text, FusionMode::Hybrid),
        (InstructionWiring::Embedding, FusionMode::Late),
    ] {
        let mut worst = 0.0f64;
        let mut passed = true;
        for seed in 0..cfg.seeds {
            let model = ZeusModel::new(ZeusConfig {
                dims,
                fusion,
                modalities: 2,
                wiring,
                share_weights: true,
                seed: seed as u64,
            })?;
            let feats = micro_features(&dims, 2, 1000 + seed as u64);
            let mut init = Init::new(2000 + seed as u64);
            let label = init
                .uniform(&[dims.mask_size, dims.mask_size], 1.0)
                .map(|u| if u > 0.3 { 1.0 } else { 0.0 });
            let loss_of = |g: &mut Graph, p: &crate::params::Bound| -> Result<Var> {
                let outs = model.logits(g, p, &feats)?;
                let t = g.constant(label.clone());
                let mut parts = Vec::new();
                for o in outs {
                    parts.push(segmentation_loss(g, o, t, &LossConfig::default())?);
                }
                crate::fusion::mean_vars(g, &parts)
            };
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let loss = loss_of(&mut g, &p)?;
            let grads = g.backward(loss)?;
            for (id, param) in model.store.iter() {
                let analytic = grads.get(p[id]);
                let mut probe = param.value.clone();
                let mut numeric = Vec::with_capacity(probe.numel());
                for i in 0..probe.numel() {
                    let orig = probe.data()[i];
                    let mut eval = |v: f64| -> Result<f64> {
                        probe.data_mut()[i] = v;
                        let mut g = Graph::new();
                        let x = g.constant(probe.clone());
                        let p = model.store.bind_with(&mut g, id, x);
                        let l = loss_of(&mut g, &p)?;
                        Ok(g.value(l).item())
                    };
                    let plus = eval(orig + cfg.h)?;
                    let minus = eval(orig - cfg.h)?;
                    probe.data_mut()[i] = orig;
                    numeric.push((plus - minus) / (2.0 * cfg.h));
                }
                let numeric = Tensor::new(param.value.shape(), numeric)?;
                let r = compare_gradients(&analytic, &numeric, cfg.rel_tol)?;
                worst = worst.max(r.max_rel_error);
                passed &= r.passed;
            }
        }
        let w = match wiring {
            InstructionWiring::Text => "text",
            InstructionWiring::Embedding => "embedding",
        };
        rows.push(OpCheck {
            name: format!("model_{}_{w}_dice_bce", fusion.name()),
            seeds: cfg.seeds,
            max_rel_error: worst,
            passed,
        });
    }
    Ok(rows)
}

/// Every op check followed by the full-model checks.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    let mut rows = Vec::new();
    for c in cases() {
        rows.push(check_case(&c, cfg)?);
    }
    rows.extend(check_attention(cfg)?);
    rows.push(check_channel_norm(cfg)?);
    rows.extend(check_model(cfg)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_cases_pass_on_two_seeds() {
        let cfg = SuiteConfig { seeds: 2, ..Default::default() };
        for c in cases() {
            let r = check_case(&c, &cfg).unwrap();
            assert!(r.passed, "{} max rel err {}", r.name, r.max_rel_error);
        }
        for r in check_attention(&cfg).unwrap() {
            assert!(r.passed, "{} {}", r.name, r.max_rel_error);
        }
    }
}
