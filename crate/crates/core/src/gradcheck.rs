//! Central-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so exactly-zero gradients compare
/// on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let out = f(&mut g, v)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(value.item())
}

/// Reverse-mode gradient of `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    Ok(g.backward(out)?.get(v))
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape(), out)
}

/// Element-wise `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn compare_gradients(analytic: &Tensor, numeric: &Tensor, rel_tol: f64) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Dimension {
            op: "compare_gradients",
            lhs: analytic.shape().to_vec(),
            rhs: numeric.shape().to_vec(),
        });
    }
    let rel_errors: Vec<f64> = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .collect();
    let max_rel_error = rel_errors.iter().fold(0.0f64, |m, &e| m.max(e));
    Ok(GradCheckReport {
        analytic: analytic.clone(),
        numeric: numeric.clone(),
        rel_errors,
        max_rel_error,
        rel_tol,
        passed: max_rel_error < rel_tol,
    })
}

/// Checks the autodiff gradient of scalar `f` at `x` against central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, h)?;
    compare_gradients(&analytic, &numeric, rel_tol)
}
