//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse of that order is a valid topological order and backward passes
//! are deterministic. Nodes are addressed through copyable [`Var`] handles.

mod conv;
mod resize;

use std::hash::{DefaultHasher, Hasher};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub(crate) use resize::{bilinear_forward, nearest};

/// Stabilizer added to the variance before the square root in `std`.
pub const STD_EPS: f64 = 1e-12;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Population standard deviation, `sqrt(var + 1e-12)`.
    Std,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Accumulation order for the contracted index of a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Summation {
    /// Sum terms in index order.
    Sequential,
    /// Sort the terms before summing, so the result does not depend on the
    /// order of the contracted index.
    OrderInvariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug)]
struct Conv2dSpec {
    geo: conv::ConvGeometry,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleBy { x: Var, s: Var },
    Ln { x: Var, lo: f64, hi: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sqrt(Var),
    Square(Var),
    Activate(Var, Activation),
    RowReduce { x: Var, kind: Reduce, rows: usize },
    WindowReduce { x: Var, kind: Reduce, windows: WindowGrid },
    MatMul { a: Var, b: Var, dims: MatDims },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape(Var),
    Concat { parts: Vec<Var> },
    Softmax { x: Var, cols: usize },
    Conv { x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec },
    Resize { x: Var, planes: usize, from: (usize, usize), to: (usize, usize) },
    BatchNorm { x: Var, gamma: Var, shift: Var, cache: NormCache },
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug)]
struct NormCache {
    channels: usize,
    plane: usize,
    batch: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

/// Sliding-window layout over the trailing two axes.
#[derive(Clone, Debug)]
pub(crate) struct WindowGrid {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub origins: Vec<(usize, usize)>,
}

impl WindowGrid {
    pub fn new(shape: &[usize], window: usize, stride: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::dim(format!("window reduction needs ≥2 axes, got {shape:?}")));
        }
        let height = shape[shape.len() - 2];
        let width = shape[shape.len() - 1];
        if window == 0 || stride == 0 {
            return Err(Error::EmptyRegion(format!(
                "window {window} with stride {stride} selects no pixels"
            )));
        }
        if window > height || window > width {
            return Err(Error::Config(format!(
                "window {window} does not fit a {height}×{width} map"
            )));
        }
        let starts = |extent: usize| (0..=extent - window).step_by(stride).collect::<Vec<_>>();
        let ys = starts(height);
        let xs = starts(width);
        let origins = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
            .collect();
        Ok(Self {
            planes: numel(&shape[..shape.len() - 2]),
            height,
            width,
            window,
            origins,
        })
    }

    fn gather(&self, data: &[f64], plane: usize, origin: (usize, usize), buf: &mut Vec<f64>) {
        buf.clear();
        let base = plane * self.height * self.width;
        for y in origin.0..origin.0 + self.window {
            let row = base + y * self.width;
            buf.extend_from_slice(&data[row + origin.1..row + origin.1 + self.window]);
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn reduce_slice(values: &[f64], kind: Reduce) -> f64 {
    let n = values.len() as f64;
    match kind {
        Reduce::Sum => values.iter().sum(),
        Reduce::Mean => values.iter().sum::<f64>() / n,
        Reduce::Std => {
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (var + STD_EPS).sqrt()
        }
    }
}

/// Writes `d reduce / d values * g` into `out` (accumulating).
fn reduce_slice_grad(values: &[f64], kind: Reduce, result: f64, g: f64, out: &mut [f64]) {
    let n = values.len() as f64;
    match kind {
        Reduce::Sum => out.iter_mut().for_each(|o| *o += g),
        Reduce::Mean => out.iter_mut().for_each(|o| *o += g / n),
        Reduce::Std => {
            let mean = values.iter().sum::<f64>() / n;
            for (o, v) in out.iter_mut().zip(values) {
                *o += g * (v - mean) / (n * result);
            }
        }
    }
}

fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.mul_scalar(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies every element of `x` by the single-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let value = self.value(x).map(|v| factor * v);
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Natural log of `x` clamped to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Ln { x, lo, hi }, |v| v.clamp(lo, hi).ln())
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.ln_clamped(x, f64::MIN_POSITIVE, f64::INFINITY)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.unary(x, Op::Activate(x, kind), |v| v.max(0.0)),
            Activation::Sigmoid => self.unary(x, Op::Activate(x, kind), sigmoid),
        }
    }

    /// Smallest distance from any ReLU or clamp input on the tape to its
    /// breakpoint. Finite differences across a breakpoint do not estimate the
    /// derivative, so gradient checks want this comfortably above the step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (x, points): (Var, &[f64]) = match &node.op {
                Op::Activate(x, Activation::Relu) => (*x, &[0.0]),
                Op::Clamp { x, lo, hi } | Op::Ln { x, lo, hi } => {
                    let d = self.data(*x).iter().map(|v| (v - lo).abs().min((v - hi).abs()));
                    margin = d.fold(margin, f64::min);
                    continue;
                }
                _ => continue,
            };
            for p in points {
                margin = self.data(x).iter().map(|v| (v - p).abs()).fold(margin, f64::min);
            }
        }
        margin
    }

    /// Hash of which side of its breakpoints every ReLU and clamp input lies
    /// on. Two evaluations with equal patterns took the same smooth branch.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            let (x, lo, hi) = match &node.op {
                Op::Activate(x, Activation::Relu) => (*x, 0.0, f64::INFINITY),
                Op::Clamp { x, lo, hi } | Op::Ln { x, lo, hi } => (*x, *lo, *hi),
                _ => continue,
            };
            for &v in self.data(x) {
                h.write_u8(u8::from(v > lo) + u8::from(v > hi));
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    /// Reduces every row of `x` viewed as `rows × (numel / rows)`; output shape `[rows]`.
    pub fn reduce_rows(&mut self, x: Var, rows: usize, kind: Reduce) -> Result<Var> {
        let n = self.value(x).numel();
        if rows == 0 || n % rows != 0 {
            return Err(Error::dim(format!("{n} elements do not split into {rows} rows")));
        }
        let cols = n / rows;
        if cols == 0 {
            return Err(Error::EmptyRegion("reduction over zero elements".into()));
        }
        let data: Vec<f64> = self.data(x).chunks(cols).map(|r| reduce_slice(r, kind)).collect();
        let value = Tensor::new(&[rows], data)?;
        Ok(self.push(value, Op::RowReduce { x, kind, rows }, &[x]))
    }

    /// Reduces all elements to a `[1]` tensor.
    pub fn reduce(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        self.reduce_rows(x, 1, kind)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Mean)
    }

    /// Reduces each `window×window` patch at the given stride over the trailing
    /// two axes. Output shape is `[planes, windows]`.
    pub fn window_reduce(&mut self, x: Var, window: usize, stride: usize, kind: Reduce) -> Result<Var> {
        let grid = WindowGrid::new(self.shape(x), window, stride)?;
        let mut buf = Vec::with_capacity(window * window);
        let mut data = Vec::with_capacity(grid.planes * grid.origins.len());
        for p in 0..grid.planes {
            for &o in &grid.origins {
                grid.gather(self.data(x), p, o, &mut buf);
                data.push(reduce_slice(&buf, kind));
            }
        }
        let value = Tensor::new(&[grid.planes, grid.origins.len()], data)?;
        Ok(self.push(value, Op::WindowReduce { x, kind, windows: grid }, &[x]))
    }

    fn mat_dims(&self, a: Var, b: Var) -> Result<MatDims> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        let dims = match (sa.len(), sb.len()) {
            (2, 2) => MatDims { batch: 1, m: sa[0], k: sa[1], n: sb[1] },
            (3, 3) if sa[0] == sb[0] => MatDims { batch: sa[0], m: sa[1], k: sa[2], n: sb[2] },
            _ => return Err(bad()),
        };
        let kb = sb[sb.len() - 2];
        if kb != dims.k {
            return Err(bad());
        }
        Ok(dims)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, Summation::Sequential)
    }

    /// Matrix product over `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul_with(&mut self, a: Var, b: Var, summation: Summation) -> Result<Var> {
        let dims = self.mat_dims(a, b)?;
        let MatDims { batch, m, k, n } = dims;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
            let (bi, i) = (row / m, row % m);
            let arow = &ad[bi * m * k + i * k..bi * m * k + (i + 1) * k];
            let bmat = &bd[bi * k * n..(bi + 1) * k * n];
            match summation {
                Summation::Sequential => {
                    for (kk, &av) in arow.iter().enumerate() {
                        let brow = &bmat[kk * n..(kk + 1) * n];
                        for (d, bv) in dst.iter_mut().zip(brow) {
                            *d += av * bv;
                        }
                    }
                }
                Summation::OrderInvariant => {
                    let mut terms = vec![0.0; k];
                    for (j, d) in dst.iter_mut().enumerate() {
                        for (kk, t) in terms.iter_mut().enumerate() {
                            *t = arow[kk] * bmat[kk * n + j];
                        }
                        *d = sorted_sum(&mut terms);
                    }
                }
            }
        });
        let shape: Vec<usize> = if self.shape(a).len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, dims }, &[a, b]))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, cols) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => return Err(Error::dim(format!("transpose needs 2-D or 3-D input, got {shape:?}"))),
        };
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for r in 0..rows {
                for c in 0..cols {
                    out[b * rows * cols + c * rows + r] = src[b * rows * cols + r * cols + c];
                }
            }
        }
        let mut new_shape = shape.clone();
        let l = new_shape.len();
        new_shape.swap(l - 1, l - 2);
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push(value, Op::Transpose { x, batch, rows, cols }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenates `N×Ci×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 4 {
            return Err(Error::dim(format!("concat_channels needs 4-D input, got {s0:?}")));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::dim(format!("concat_channels: {s:?} does not match {s0:?}")));
            }
            channels += s[1];
        }
        let (batch, plane) = (s0[0], s0[2] * s0[3]);
        let mut out = Vec::with_capacity(batch * channels * plane);
        for n in 0..batch {
            for p in parts {
                let c = self.shape(*p)[1];
                out.extend_from_slice(&self.data(*p)[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[batch, channels, s0[2], s0[3]], out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Softmax along the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::dim("softmax of a 0-d tensor"))?;
        let mut out = self.data(x).to_vec();
        let mut terms = vec![0.0; cols];
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in row.iter_mut() {
                *v = (*v - max).exp();
            }
            terms.copy_from_slice(row);
            let denom = sorted_sum(&mut terms);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, cols }, &[x]))
    }

    /// 2-D cross-correlation. `x` is `N×Cin×H×W`, `w` is `Cout×Cin×k×k`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::dim(format!("conv2d: input {xs:?} with kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d: input {xs:?} has {} channels but kernel {ws:?} expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 || xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::dim(format!(
                "conv2d: kernel {ws:?} (stride {stride}, padding {padding}) does not fit input {xs:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geo = conv::ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let out = conv::forward(&geo, self.data(x), self.data(w), bias.map(|b| self.data(b)));
        let value = Tensor::new(&[geo.batch, geo.out_channels, geo.out_height(), geo.out_width()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv { x, w, bias, spec: Conv2dSpec { geo } }, &inputs))
    }

    /// Bilinear resize of the trailing two axes (half-pixel centers, clamped edges).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("cannot resize {shape:?} to {out_h}×{out_w}")));
        }
        let l = shape.len();
        let from = (shape[l - 2], shape[l - 1]);
        let planes = numel(&shape[..l - 2]);
        let out = resize::bilinear_forward(self.data(x), planes, from, (out_h, out_w));
        let mut new_shape = shape.clone();
        new_shape[l - 2] = out_h;
        new_shape[l - 1] = out_w;
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push(value, Op::Resize { x, planes, from, to: (out_h, out_w) }, &[x]))
    }

    /// Per-channel batch normalization over `N×C×H×W`.
    ///
    /// Train mode normalizes by batch statistics and updates `stats` with
    /// momentum [`BN_MOMENTUM`]; eval mode normalizes by `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        shift: Var,
        stats: &mut RunningStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("batch_norm needs N×C×H×W input, got {shape:?}")));
        }
        let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [channels] || self.shape(shift) != [channels] || stats.mean.len() != channels {
            return Err(Error::dim(format!(
                "batch_norm: affine parameters do not match {channels} channels"
            )));
        }
        let count = batch * plane;
        let xd = self.data(x);
        let (gd, sd) = (self.data(gamma), self.data(shift));
        let mut inv_std = vec![0.0; channels];
        let mut means = vec![0.0; channels];
        match mode {
            NormMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch_norm in train mode sees {count} value per channel for shape {shape:?}"
                    )));
                }
                for c in 0..channels {
                    let vals = || (0..batch).flat_map(move |n| xd[(n * channels + c) * plane..(n * channels + c + 1) * plane].iter());
                    let mean = vals().sum::<f64>() / count as f64;
                    let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
                    means[c] = mean;
                    inv_std[c] = 1.0 / (var + eps).sqrt();
                    stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
                }
            }
            NormMode::Eval => {
                for c in 0..channels {
                    means[c] = stats.mean[c];
                    inv_std[c] = 1.0 / (stats.var[c] + eps).sqrt();
                }
            }
        }
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - means[c]) * inv_std[c];
                    out[i] = gd[c] * xhat[i] + sd[c];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let cache = NormCache {
            channels,
            plane,
            batch,
            xhat,
            inv_std,
            train: mode == NormMode::Train,
        };
        Ok(self.push(value, Op::BatchNorm { x, gamma, shift, cache }, &[x, gamma, shift]))
    }

    /// Reverse pass from a single-element root.
    ///
    /// Gradients accumulate into every reachable node that requires them;
    /// calling twice without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            match &mut self.nodes[idx].grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(g, y)| g / y).collect());
                }
                if self.wants(*b) {
                    let db = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulScalar(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::ScaleBy { x, s } => {
                let factor = self.value(*s).item()?;
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
                }
                if self.wants(*s) {
                    let ds = g.iter().zip(self.data(*x)).map(|(g, v)| g * v).sum();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::Ln { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v < *lo || v > *hi { 0.0 } else { g / v })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v < *lo || v > *hi { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sqrt(x) => {
                self.accumulate(grads, *x, g.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect());
            }
            Op::Square(x) => {
                let dx = g.iter().zip(self.data(*x)).map(|(g, v)| 2.0 * g * v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Activate(x, Activation::Relu) => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Activate(x, Activation::Sigmoid) => {
                let dx = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::RowReduce { x, kind, rows } => {
                let xd = self.data(*x);
                let cols = xd.len() / rows;
                let mut dx = vec![0.0; xd.len()];
                for r in 0..*rows {
                    let span = r * cols..(r + 1) * cols;
                    reduce_slice_grad(&xd[span.clone()], *kind, out[r], g[r], &mut dx[span]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WindowReduce { x, kind, windows } => {
                let xd = self.data(*x);
                let mut dx = vec![0.0; xd.len()];
                let mut buf = Vec::new();
                let mut local = vec![0.0; windows.window * windows.window];
                let m = windows.origins.len();
                for p in 0..windows.planes {
                    for (wi, &o) in windows.origins.iter().enumerate() {
                        windows.gather(xd, p, o, &mut buf);
                        local.iter_mut().for_each(|v| *v = 0.0);
                        reduce_slice_grad(&buf, *kind, out[p * m + wi], g[p * m + wi], &mut local);
                        let base = p * windows.height * windows.width;
                        for dy in 0..windows.window {
                            let row = base + (o.0 + dy) * windows.width + o.1;
                            for dxi in 0..windows.window {
                                dx[row + dxi] += local[dy * windows.window + dxi];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul { a, b, dims } => {
                let MatDims { batch, m, k, n } = *dims;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    da.par_chunks_mut(k).enumerate().for_each(|(row, dst)| {
                        let (bi, i) = (row / m, row % m);
                        let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                        for (kk, d) in dst.iter_mut().enumerate() {
                            let brow = &bd[bi * k * n + kk * n..bi * k * n + (kk + 1) * n];
                            *d = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(bi, dst)| {
                        for i in 0..m {
                            let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                            for kk in 0..k {
                                let av = ad[bi * m * k + i * k + kk];
                                let d = &mut dst[kk * n..(kk + 1) * n];
                                for (dv, gv) in d.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                let mut dx = vec![0.0; g.len()];
                for b in 0..*batch {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[b * rows * cols + r * cols + c] = g[b * rows * cols + c * rows + r];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat { parts } => {
                let s = node.value.shape();
                let (batch, total, plane) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(batch * c * plane);
                        for n in 0..batch {
                            let start = (n * total + offset) * plane;
                            dp.extend_from_slice(&g[start..start + c * plane]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += c;
                }
            }
            Op::Softmax { x, cols } => {
                let mut dx = vec![0.0; g.len()];
                for ((dst, gr), yr) in dx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(out.chunks(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv { x, w, bias, spec } => {
                let want = (self.wants(*x), self.wants(*w), bias.map(|b| self.wants(b)).unwrap_or(false));
                let r = conv::backward(&spec.geo, self.data(*x), self.data(*w), g, want);
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (bias, r.dbias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Resize { x, planes, from, to } => {
                self.accumulate(grads, *x, resize::bilinear_backward(g, *planes, *from, *to));
            }
            Op::BatchNorm { x, gamma, shift, cache } => {
                let NormCache { channels, plane, batch, xhat, inv_std, train } = cache;
                let gd = self.data(*gamma);
                let count = (batch * plane) as f64;
                let mut dgamma = vec![0.0; *channels];
                let mut dshift = vec![0.0; *channels];
                for n in 0..*batch {
                    for c in 0..*channels {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            dgamma[c] += g[i] * xhat[i];
                            dshift[c] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for c in 0..*channels {
                        let k = gd[c] * inv_std[c];
                        for n in 0..*batch {
                            let base = (n * channels + c) * plane;
                            for i in base..base + plane {
                                dx[i] = if *train {
                                    k * (g[i] - dshift[c] / count - xhat[i] * dgamma[c] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *shift, dshift);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
