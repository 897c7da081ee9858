//! Early, hybrid and late modality fusion, and a small convolutional
//! baseline that supports all three.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, LayerNorm};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Early,
    Hybrid,
    Late,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Early, FusionMode::Hybrid, FusionMode::Late];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Early => "early",
            FusionMode::Hybrid => "hybrid",
            FusionMode::Late => "late",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionMode::Early),
            "hybrid" => Ok(FusionMode::Hybrid),
            "late" => Ok(FusionMode::Late),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

fn check_nonempty_same(op: &'static str, parts: &[&Tensor]) -> Result<()> {
    let first = parts.first().ok_or_else(|| Error::Input(format!("{op}: no modalities")))?;
    for p in parts {
        if p.shape() != first.shape() {
            return Err(dim_err(op, first.shape(), p.shape()));
        }
    }
    Ok(())
}

/// Channel concatenation of `[1, S, S]` images in list order.
pub fn fuse_early(images: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.iter().collect();
    check_nonempty_same("fuse_early", &refs)?;
    let s = images[0].shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Shape { op: "fuse_early", detail: format!("expected 1×S×S images, got {:?}", s) });
    }
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), s[1], s[2]], data)
}

fn mean_of(parts: &[&Tensor]) -> Tensor {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    let k = parts.len() as f64;
    acc.map(|v| v / k)
}

/// Element-wise mean of the per-modality embeddings and aligned prompts.
pub fn fuse_hybrid(embeddings: &[Tensor], prompts: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if embeddings.len() != prompts.len() {
        return Err(Error::Input(format!(
            "fuse_hybrid: {} embeddings vs {} prompts",
            embeddings.len(),
            prompts.len()
        )));
    }
    let e: Vec<&Tensor> = embeddings.iter().collect();
    let p: Vec<&Tensor> = prompts.iter().collect();
    check_nonempty_same("fuse_hybrid", &e)?;
    check_nonempty_same("fuse_hybrid", &p)?;
    if e.len() == 1 {
        return Ok((e[0].clone(), p[0].clone()));
    }
    Ok((mean_of(&e), mean_of(&p)))
}

/// Differentiable element-wise mean of graph values.
pub fn mean_vars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    match parts {
        [] => Err(Error::Input("mean of zero tensors".into())),
        [one] => Ok(*one),
        _ => {
            let s = g.add_all(parts)?;
            Ok(g.scale(s, 1.0 / parts.len() as f64))
        }
    }
}

/// Pixel-wise mean probability, foreground iff strictly above one half.
pub fn fuse_late(prob_masks: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = prob_masks.iter().collect();
    check_nonempty_same("fuse_late", &refs)?;
    for m in prob_masks {
        if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("fuse_late: probabilities must lie in [0, 1]".into()));
        }
    }
    let n = prob_masks.len() as f64;
    let mut sum = Tensor::zeros(prob_masks[0].shape());
    for m in prob_masks {
        for (a, b) in sum.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    Ok(sum.map(|s| if s / n > 0.5 { 1.0 } else { 0.0 }))
}

/// Element count over trainable tensors.
pub fn count_trainable_params(store: &ParamStore) -> usize {
    store.count_trainable()
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan = cin * k * k;
        Self {
            w: bld.weight(&format!("{name}.weight"), &[cout, cin, k, k], fan),
            b: bld.bias(&format!("{name}.bias"), &[cout], fan),
            stride,
            pad,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.w], self.stride, self.pad)?;
        g.add_channel(y, p[self.b])
    }
}

#[derive(Debug, Clone)]
struct UpConv {
    w: ParamId,
    b: ParamId,
}

impl UpConv {
    fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: bld.weight(&format!("{name}.weight"), &[cin, cout, 2, 2], cin),
            b: bld.bias(&format!("{name}.bias"), &[cout], cin),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv_transpose2d(x, p[self.w], 2, 0)?;
        g.add_channel(y, p[self.b])
    }
}

/// Channel widths of the three encoder stages.
pub const BASELINE_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<(Conv, LayerNorm, Conv)>,
}

/// Skip features per stage plus the bottleneck.
struct Features {
    skips: Vec<Var>,
    bottom: Var,
}

impl Encoder {
    fn new(b: &mut Builder, name: &str, in_chans: usize) -> Self {
        let mut cin = in_chans;
        let stages = BASELINE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv::new(b, &format!("{name}.conv{i}"), cin, w, 3, 1, 1);
                let norm = LayerNorm::new(b, &format!("{name}.norm{i}"), w);
                let next = BASELINE_WIDTHS.get(i + 1).copied().unwrap_or(w);
                let down = Conv::new(b, &format!("{name}.down{i}"), w, next, 2, 2, 0);
                cin = next;
                (conv, norm, down)
            })
            .collect();
        Self { stages }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Features> {
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (conv, norm, down) in &self.stages {
            let y = conv.forward(g, p, h)?;
            let y = norm.forward_channels(g, p, y)?;
            let y = g.gelu(y);
            skips.push(y);
            let d = down.forward(g, p, y)?;
            h = g.gelu(d);
        }
        Ok(Features { skips, bottom: h })
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    ups: Vec<UpConv>,
    head: Conv,
}

impl Decoder {
    fn new(b: &mut Builder, name: &str) -> Self {
        let n = BASELINE_WIDTHS.len();
        let ups = (0..n)
            .rev()
            .map(|i| {
                let cin = BASELINE_WIDTHS.get(i + 1).copied().unwrap_or(BASELINE_WIDTHS[n - 1]);
                UpConv::new(b, &format!("{name}.up{i}"), cin, BASELINE_WIDTHS[i])
            })
            .collect();
        let head = Conv::new(b, &format!("{name}.head"), BASELINE_WIDTHS[0], 1, 1, 1, 0);
        Self { ups, head }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, f: &Features) -> Result<Var> {
        let mut h = f.bottom;
        for (up, skip) in self.ups.iter().zip(f.skips.iter().rev()) {
            let u = up.forward(g, p, h)?;
            let u = g.gelu(u);
            h = g.add(u, *skip)?;
        }
        let y = self.head.forward(g, p, h)?;
        let side = g.shape(y)[1];
        g.reshape(y, &[side, side])
    }
}

/// Three-stage convolutional encoder-decoder with additive skips.
///
/// Early fusion stacks modalities as input channels; hybrid fusion runs one
/// encoder per modality and averages their features before a shared
/// decoder; late fusion trains a full network per modality.
#[derive(Debug, Clone)]
pub struct BaselineSegNet {
    pub mode: FusionMode,
    pub modalities: usize,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
}

impl BaselineSegNet {
    pub const PREFIX: &'static str = "baseline";

    pub fn new(b: &mut Builder, mode: FusionMode, modalities: usize) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::Config("baseline needs at least one modality".into()));
        }
        let p = Self::PREFIX;
        let (encoders, decoders) = match mode {
            FusionMode::Early => (
                alloc::vec![Encoder::new(b, &format!("{p}.enc"), modalities)],
                alloc::vec![Decoder::new(b, &format!("{p}.dec"))],
            ),
            FusionMode::Hybrid => (
                (0..modalities).map(|m| Encoder::new(b, &format!("{p}.enc{m}"), 1)).collect(),
                alloc::vec![Decoder::new(b, &format!("{p}.dec"))],
            ),
            FusionMode::Late => {
                let mut enc = Vec::new();
                let mut dec = Vec::new();
                for m in 0..modalities {
                    enc.push(Encoder::new(b, &format!("{p}.enc{m}"), 1));
                    dec.push(Decoder::new(b, &format!("{p}.dec{m}")));
                }
                (enc, dec)
            }
        };
        Ok(Self { mode, modalities, encoders, decoders })
    }

    /// Logit maps: one for early and hybrid, one per modality for late.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: &[Tensor]) -> Result<Vec<Var>> {
        if images.len() != self.modalities {
            return Err(Error::Input(format!(
                "baseline expects {} modalities, got {}",
                self.modalities,
                images.len()
            )));
        }
        match self.mode {
            FusionMode::Early => {
                let x = g.constant(fuse_early(images)?);
                let f = self.encoders[0].forward(g, p, x)?;
                Ok(alloc::vec![self.decoders[0].forward(g, p, &f)?])
            }
            FusionMode::Hybrid => {
                let mut feats = Vec::with_capacity(images.len());
                for (enc, img) in self.encoders.iter().zip(images) {
                    let x = g.constant(img.clone());
                    feats.push(enc.forward(g, p, x)?);
                }
                let mut skips = Vec::new();
                for level in 0..BASELINE_WIDTHS.len() {
                    let parts: Vec<Var> = feats.iter().map(|f| f.skips[level]).collect();
                    skips.push(mean_vars(g, &parts)?);
                }
                let bottoms: Vec<Var> = feats.iter().map(|f| f.bottom).collect();
                let fused = Features { skips, bottom: mean_vars(g, &bottoms)? };
                Ok(alloc::vec![self.decoders[0].forward(g, p, &fused)?])
            }
            FusionMode::Late => {
                let mut out = Vec::with_capacity(images.len());
                for ((enc, dec), img) in self.encoders.iter().zip(&self.decoders).zip(images) {
                    let x = g.constant(img.clone());
                    let f = enc.forward(g, p, x)?;
                    out.push(dec.forward(g, p, &f)?);
                }
                Ok(out)
            }
        }
    }

    /// Binary prediction, applying the late-fusion vote where relevant.
    pub fn predict(&self, store: &ParamStore, images: &[Tensor], threshold: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let outs = self.forward(&mut g, &p, images)?;
        let probs: Vec<Tensor> = outs.iter().map(|&v| crate::loss::sigmoid(g.value(v))).collect();
        match self.mode {
            FusionMode::Late => fuse_late(&probs),
            _ => Ok(crate::loss::binarize(&probs[0], threshold)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, WeightInit};
    use crate::params::Init;
    use alloc::vec;

    fn img(v: f64) -> Tensor {
        Tensor::full(&[1, 4, 4], v)
    }

    #[test]
    fn early_concatenates_in_order() {
        let a = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 2, 2], |i| 10.0 + i as f64);
        let ab = fuse_early(&[a.clone(), b.clone()]).unwrap();
        let ba = fuse_early(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab.shape(), &[2, 2, 2]);
        assert_eq!(ab.index_outer(0).data(), a.data());
        assert_eq!(ba.index_outer(0).data(), b.data());
        assert_ne!(ab, ba);
        assert!(fuse_early(&[a, Tensor::zeros(&[1, 3, 3])]).is_err());
    }

    #[test]
    fn hybrid_mean_examples() {
        let a = Tensor::from_fn(&[2, 2, 2], |i| i as f64 - 3.0);
        let p = Tensor::ones(&[1, 2]);
        let (e, q) = fuse_hybrid(&[a.clone()], &[p.clone()]).unwrap();
        assert_eq!((e, q), (a.clone(), p.clone()));
        let (e, _) = fuse_hybrid(&[a.clone(), a.clone()], &[p.clone(), p.clone()]).unwrap();
        assert_eq!(e, a);
        let (e, _) = fuse_hybrid(&[a.clone(), a.map(|v| -v)], &[p.clone(), p]).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn late_vote_examples() {
        let m = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f64);
        assert_eq!(fuse_late(&[m.clone(), m.clone(), m.clone()]).unwrap(), m);
        let lo = Tensor::full(&[1, 1], 0.2);
        let hi = Tensor::full(&[1, 1], 0.8);
        assert_eq!(fuse_late(&[lo, hi]).unwrap().item(), 0.0);
        assert_eq!(fuse_late(&[Tensor::full(&[1, 1], 0.51)]).unwrap().item(), 1.0);
        assert!(matches!(fuse_late(&[Tensor::full(&[1, 1], 1.5)]), Err(Error::Input(_))));
    }

    #[test]
    fn dense_layer_count() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let mut b = Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true };
        Linear::new(&mut b, "fc", 2, 3, true);
        assert_eq!(count_trainable_params(&store), 9);
        store.freeze();
        assert_eq!(count_trainable_params(&store), 0);
    }

    fn baseline_params(mode: FusionMode, m: usize) -> usize {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let mut b = Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true };
        BaselineSegNet::new(&mut b, mode, m).unwrap();
        count_trainable_params(&store)
    }

    #[test]
    fn baseline_params_grow_with_duplication() {
        for m in 2..=4 {
            let e = baseline_params(FusionMode::Early, m);
            let h = baseline_params(FusionMode::Hybrid, m);
            let l = baseline_params(FusionMode::Late, m);
            assert!(e < h && h < l, "{e} {h} {l}");
        }
    }

    #[test]
    fn baseline_shapes() {
        for mode in FusionMode::ALL {
            let mut store = ParamStore::new();
            let mut init = Init::new(0);
            let mut b = Builder { store: &mut store, init: &mut init, scheme: WeightInit::FanIn, trainable: true };
            let net = BaselineSegNet::new(&mut b, mode, 2).unwrap();
            let imgs = vec![Tensor::from_fn(&[1, 16, 16], |i| (i % 7) as f64 / 7.0); 2];
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let outs = net.forward(&mut g, &p, &imgs).unwrap();
            assert_eq!(outs.len(), if mode == FusionMode::Late { 2 } else { 1 });
            assert_eq!(g.shape(outs[0]), &[16, 16]);
            let pred = net.predict(&store, &imgs, 0.5).unwrap();
            assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(net.forward(&mut g, &p, &[img(0.0)]).is_err());
        }
    }

    #[test]
    fn fusion_mode_parses() {
        assert_eq!("late".parse::<FusionMode>().unwrap(), FusionMode::Late);
        assert!("mid".parse::<FusionMode>().is_err());
    }
}
