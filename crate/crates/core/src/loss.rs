//! Dice + BCE objective and overlap metrics.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probability clamp used by the cross-entropy term.
pub const BCE_DELTA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { dice_smooth: 1.0, bce_weight: 1.0, dice_weight: 1.0, threshold: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth must be positive, got {}", self.dice_smooth)));
        }
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 || self.bce_weight + self.dice_weight == 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(dim_err(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `1 − (2·Σ p·t + ε) / (Σp + Σt + ε)`.
pub fn dice_loss(g: &mut Graph, probs: Var, target: Var, eps: f64) -> Result<Var> {
    check_same("dice_loss", g, probs, target)?;
    let inter = g.mul(probs, target)?;
    let inter = g.sum(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let sp = g.sum(probs);
    let st = g.sum(target);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean binary cross-entropy on probabilities clamped to `[δ, 1−δ]`.
pub fn bce_loss(g: &mut Graph, probs: Var, target: Var) -> Result<Var> {
    check_same("bce_loss", g, probs, target)?;
    let p = g.clamp(probs, BCE_DELTA, 1.0 - BCE_DELTA);
    let lp = g.ln(p)?;
    let one_minus = g.scale(p, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let lq = g.ln(one_minus)?;
    let a = g.mul(target, lp)?;
    let one_minus_t = g.scale(target, -1.0);
    let one_minus_t = g.add_scalar(one_minus_t, 1.0);
    let b = g.mul(one_minus_t, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Weighted Dice + BCE on the sigmoid of `logits`.
pub fn segmentation_loss(g: &mut Graph, logits: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let probs = g.sigmoid(logits);
    let d = dice_loss(g, probs, target, cfg.dice_smooth)?;
    let b = bce_loss(g, probs, target)?;
    let d = g.scale(d, cfg.dice_weight);
    let b = g.scale(b, cfg.bce_weight);
    g.add(d, b)
}

/// Foreground iff `p > threshold`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Tensor {
    probs.map(|p| if p > threshold { 1.0 } else { 0.0 })
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(|x| 1.0 / (1.0 + libm::exp(-x)))
}

fn counts(pred: &Tensor, target: &Tensor, op: &'static str) -> Result<(u64, u64, u64, u64)> {
    if pred.shape() != target.shape() {
        return Err(dim_err(op, pred.shape(), target.shape()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p > 0.5, t > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((tp, fp, fn_, tn))
}

/// `2|P∩T| / (|P|+|T|)`, 1 when both masks are empty.
pub fn dsc(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (tp, fp, fn_, _) = counts(pred, target, "dsc")?;
    let den = 2 * tp + fp + fn_;
    Ok(if den == 0 { 1.0 } else { (2 * tp) as f64 / den as f64 })
}

/// Mean of foreground and background IoU; an absent class scores 1.
pub fn miou(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (tp, fp, fn_, tn) = counts(pred, target, "miou")?;
    let iou = |hit: u64, union: u64| if union == 0 { 1.0 } else { hit as f64 / union as f64 };
    Ok(0.5 * (iou(tp, tp + fp + fn_) + iou(tn, tn + fp + fn_)))
}

/// Foreground IoU alone.
pub fn iou_fg(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (tp, fp, fn_, _) = counts(pred, target, "iou")?;
    let u = tp + fp + fn_;
    Ok(if u == 0 { 1.0 } else { tp as f64 / u as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn eval(f: impl Fn(&mut Graph, Var, Var) -> Result<Var>, p: &Tensor, t: &Tensor) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(p.clone());
        let t = g.constant(t.clone());
        let y = f(&mut g, p, t).unwrap();
        g.value(y).item()
    }

    #[test]
    fn dice_examples() {
        let t = Tensor::from_fn(&[8, 8], |i| if i < 16 { 1.0 } else { 0.0 });
        let d = |p: &Tensor, t: &Tensor| eval(|g, p, t| dice_loss(g, p, t, 1.0), p, t);
        assert!(d(&t, &t).abs() < 1e-15);
        assert!((d(&Tensor::zeros(&[8, 8]), &t) - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
        assert!(d(&Tensor::zeros(&[8, 8]), &Tensor::zeros(&[8, 8])).abs() < 1e-15);
        assert!(d(&Tensor::full(&[8, 8], 0.5), &t) > 0.0);
    }

    #[test]
    fn bce_examples() {
        let t = Tensor::from_fn(&[4, 4], |i| (i % 2) as f64);
        let b = |p: &Tensor, t: &Tensor| eval(bce_loss, p, t);
        assert!((b(&Tensor::full(&[4, 4], 0.5), &t) - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(b(&t, &t) < 1e-6);
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let p = Tensor::new(&[1, 1], vec![0.9]).unwrap();
        assert!((b(&p, &one) - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(dice_loss(&mut g, a, b, 1.0).is_err());
        assert!(bce_loss(&mut g, a, b).is_err());
        assert!(dsc(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = |f: &dyn Fn(usize) -> bool| Tensor::from_fn(&[4, 4], |i| if f(i) { 1.0 } else { 0.0 });
        let left = m(&|i| i % 4 < 2);
        let top = m(&|i| i < 8);
        assert_eq!(dsc(&left, &left).unwrap(), 1.0);
        assert_eq!(miou(&left, &left).unwrap(), 1.0);
        assert!((miou(&left, &top).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&m(&|i| i < 4), &m(&|i| i >= 12)).unwrap(), 0.0);
        assert_eq!(dsc(&m(&|i| i < 4), &m(&|i| (2..6).contains(&i))).unwrap(), 0.5);
        assert_eq!(miou(&Tensor::ones(&[4, 4]), &Tensor::zeros(&[4, 4])).unwrap(), 0.0);
        assert_eq!(dsc(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 4])).unwrap(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { dice_smooth: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { dice_weight: 0.0, bce_weight: 0.0, ..Default::default() }.validate().is_err());
    }
}
