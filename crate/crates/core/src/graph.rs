//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Graph`]; parents always have lower
//! indices than their children, so the node list is already a topological
//! order and [`Graph::backward`] walks it once in reverse.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x[.., d] + r[d]`, broadcasting the row over all leading positions.
    AddRow(Var, Var),
    /// `x[C, ..] + b[C]`, broadcasting per leading channel.
    AddChannel(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, width: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    MeanRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Box<[Var]>),
    Conv2d { x: Var, w: Var, g: ConvGeom },
    ConvT2d { x: Var, w: Var, g: ConvGeom },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor; zero when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.wrt(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients will flow into `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Inserts a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    /// Element-wise `a / b`; `b` must be non-zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), t))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let t = self.any_tracked(&[a]);
        self.push(v, Op::Scale(a, k), t)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let t = self.any_tracked(&[a]);
        self.push(v, Op::AddScalar(a), t)
    }

    /// Sum of several equally shaped tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Input("add_all of zero tensors".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Adds a row vector (`[d]` or `[1, d]`) to every row of `x[.., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.value(row).numel() != d || d == 0 {
            return Err(dim_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let t = self.any_tracked(&[x, row]);
        Ok(self.push(v, Op::AddRow(x, row), t))
    }

    /// Adds `b[C]` to every element of channel `c` of `x[C, ..]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(b).numel() != c {
            return Err(dim_err("add_channel", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        let inner = v.numel() / c;
        for (ci, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            for o in chunk {
                *o += bias[ci];
            }
        }
        let t = self.any_tracked(&[x, b]);
        Ok(self.push(v, Op::AddChannel(x, b), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2d()?;
        let t = self.any_tracked(&[a]);
        Ok(self.push(v, Op::Transpose(a), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let t = self.any_tracked(&[a]);
        Ok(self.push(v, Op::Reshape(a), t))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: alloc::format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = libm::exp(src[at(k)] - max);
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        let t = self.any_tracked(&[x]);
        Ok(self.push(v, Op::Softmax { x, outer, len, inner }, t))
    }

    /// Layer normalization over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if width == 0 || self.value(gamma).numel() != width || self.value(beta).numel() != width {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter("layer_norm eps must be positive".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / width;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = g[j] * h + b[j];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let t = self.any_tracked(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm { x, gamma, beta, width, xhat, rstd },
            t,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let t = self.any_tracked(&[x]);
        self.push(v, Op::Gelu(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let t = self.any_tracked(&[x]);
        self.push(v, Op::Sigmoid(x), t)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Numeric("ln of non-positive value".into()));
        }
        let v = self.value(x).map(libm::log);
        let t = self.any_tracked(&[x]);
        Ok(self.push(v, Op::Ln(x), t))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|x| x.clamp(lo, hi));
        let t = self.any_tracked(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let t = self.any_tracked(&[x]);
        self.push(v, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the rows of `x[n, d]`, giving `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                detail: alloc::format!("expected non-empty 2-D, got {:?}", shape),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for row in src.chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let v = Tensor::new(&[1, d], out)?;
        let t = self.any_tracked(&[x]);
        Ok(self.push(v, Op::MeanRows(x), t))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || start + len > shape[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: alloc::format!("{}..{} out of range for {:?}", start, start + len, shape),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(&[r, len], out)?;
        let t = self.any_tracked(&[x]);
        Ok(self.push(v, Op::SliceCols { x, start }, t))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[0],
            _ => return Err(Error::Input("concat_cols needs 2-D inputs".into())),
        };
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), s));
            }
            total += s[1];
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let v = Tensor::new(&[rows, total], out)?;
        let t = self.any_tracked(parts);
        Ok(self.push(v, Op::ConcatCols(parts.into()), t))
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w)),
            [c, h, w] => Ok((1, c, h, w)),
            ref s => Err(Error::Shape {
                op,
                detail: alloc::format!("expected N×C×H×W or C×H×W, got {:?}", s),
            }),
        }
    }

    /// Cross-correlation of `x[N,C,H,W]` (or `[C,H,W]`) with `w[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.image_dims("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c {
            return Err(dim_err("conv2d", self.shape(x), &ws));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(dim_err("conv2d", self.shape(x), &ws));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let g = ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow };
        let xs = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            let cols = kernels::im2col(&xs[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow);
            kernels::matmul(wv, &cols, &mut out[b * o * oh * ow..(b + 1) * o * oh * ow], o, c * kh * kw, oh * ow);
        }
        let shape = if self.shape(x).len() == 4 { vec![n, o, oh, ow] } else { vec![o, oh, ow] };
        let v = Tensor::new(&shape, out)?;
        let t = self.any_tracked(&[x, w]);
        Ok(self.push(v, Op::Conv2d { x, w, g }, t))
    }

    /// Transposed convolution of `x[N,C,H,W]` with `w[C,O,kh,kw]`.
    ///
    /// Output side is `(H-1)·stride - 2·pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv_transpose2d stride must be positive".into()));
        }
        let (n, c, h, wd) = self.image_dims("conv_transpose2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c {
            return Err(dim_err("conv_transpose2d", self.shape(x), &ws));
        }
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::Parameter("conv_transpose2d padding too large".into()));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        // Geometry is stored from the point of view of the adjoint convolution:
        // the output image is the "input" that im2col would unfold.
        let g = ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow };
        let xs = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            let mut cols = vec![0.0; o * kh * kw * h * wd];
            kernels::matmul_tn(wv, &xs[b * c * h * wd..(b + 1) * c * h * wd], &mut cols, o * kh * kw, c, h * wd);
            kernels::col2im(&cols, &mut out[b * o * oh * ow..(b + 1) * o * oh * ow], o, oh, ow, kh, kw, stride, pad, h, wd);
        }
        let shape = if self.shape(x).len() == 4 { vec![n, o, oh, ow] } else { vec![o, oh, ow] };
        let v = Tensor::new(&shape, out)?;
        let t = self.any_tracked(&[x, w]);
        Ok(self.push(v, Op::ConvT2d { x, w, g }, t))
    }

    /// Propagates gradients from a scalar `loss` back to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        // Only tracked nodes keep gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.tracked {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(g, gout, 1.0));
                acc(*b, &mut |g| axpy(g, gout, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(g, gout, 1.0));
                acc(*b, &mut |g| axpy(g, gout, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |g| axpy(g, gout, *k)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| axpy(g, gout, 1.0)),
            Op::AddRow(x, r) => {
                acc(*x, &mut |g| axpy(g, gout, 1.0));
                acc(*r, &mut |g| {
                    let d = g.len();
                    for chunk in gout.chunks(d) {
                        axpy(g, chunk, 1.0);
                    }
                });
            }
            Op::AddChannel(x, b) => {
                acc(*x, &mut |g| axpy(g, gout, 1.0));
                acc(*b, &mut |g| {
                    let inner = gout.len() / g.len();
                    for (ci, chunk) in gout.chunks(inner).enumerate() {
                        g[ci] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |g| kernels::matmul_nt(gout, bv, g, m, n, k));
                acc(*b, &mut |g| kernels::matmul_tn(av, gout, g, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let back = kernels::transpose(gout, c, r);
                acc(*a, &mut |g| axpy(g, &back, 1.0));
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| gout[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                g[at(k)] += y[at(k)] * (gout[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, width, xhat, rstd } => {
                let d = *width;
                let gm = self.value(*gamma).data();
                acc(*x, &mut |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = go[j] * gm[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = go[j] * gm[j];
                            g[r * d + j] += rs * (dxh - s1 / d as f64 - xh[j] * s2 / d as f64);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (i, (go, xh)) in gout.iter().zip(xhat).enumerate() {
                        g[i % d] += go * xh;
                    }
                });
                acc(*beta, &mut |g| {
                    for (i, go) in gout.iter().enumerate() {
                        g[i % d] += go;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / xv[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gout[0];
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += s));
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x)[0] as f64;
                acc(*x, &mut |g| {
                    let d = gout.len();
                    for chunk in g.chunks_mut(d) {
                        for (o, go) in chunk.iter_mut().zip(gout) {
                            *o += go / n;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (i, row) in gout.chunks(len).enumerate() {
                        axpy(&mut g[i * c + start..i * c + start + len], row, 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts.iter() {
                    let c = self.shape(p)[1];
                    acc(p, &mut |g| {
                        for (i, row) in g.chunks_mut(c).enumerate() {
                            axpy(row, &gout[i * total + off..i * total + off + c], 1.0);
                        }
                    });
                    off += c;
                }
            }
            Op::Conv2d { x, w, g: geo } => {
                let ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow } = *geo;
                let xs = self.value(*x).data();
                let wv = self.value(*w).data();
                let ck = c * kh * kw;
                let hw = oh * ow;
                let x_tracked = self.nodes[x.0].tracked;
                let mut dx = if x_tracked { vec![0.0; xs.len()] } else { Vec::new() };
                let mut dw = vec![0.0; wv.len()];
                for b in 0..n {
                    let go = &gout[b * o * hw..(b + 1) * o * hw];
                    let cols = kernels::im2col(&xs[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow);
                    kernels::matmul_nt(go, &cols, &mut dw, o, hw, ck);
                    if x_tracked {
                        let mut dcols = vec![0.0; ck * hw];
                        kernels::matmul_tn(wv, go, &mut dcols, ck, o, hw);
                        kernels::col2im(&dcols, &mut dx[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow);
                    }
                }
                acc(*w, &mut |g| axpy(g, &dw, 1.0));
                if x_tracked {
                    acc(*x, &mut |g| axpy(g, &dx, 1.0));
                }
            }
            Op::ConvT2d { x, w, g: geo } => {
                let ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow } = *geo;
                let xs = self.value(*x).data();
                let wv = self.value(*w).data();
                let ok = o * kh * kw;
                let hw = h * wd;
                let x_tracked = self.nodes[x.0].tracked;
                let mut dx = if x_tracked { vec![0.0; xs.len()] } else { Vec::new() };
                let mut dw = vec![0.0; wv.len()];
                for b in 0..n {
                    let go = &gout[b * o * oh * ow..(b + 1) * o * oh * ow];
                    let dcols = kernels::im2col(go, o, oh, ow, kh, kw, stride, pad, h, wd);
                    let xb = &xs[b * c * hw..(b + 1) * c * hw];
                    // w is [C, O·kh·kw]; cols = wᵀ·x
                    kernels::matmul_nt(xb, &dcols, &mut dw, c, hw, ok);
                    if x_tracked {
                        kernels::matmul(wv, &dcols, &mut dx[b * c * hw..(b + 1) * c * hw], c, ok, hw);
                    }
                }
                acc(*w, &mut |g| axpy(g, &dw, 1.0));
                if x_tracked {
                    acc(*x, &mut |g| axpy(g, &dx, 1.0));
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}
