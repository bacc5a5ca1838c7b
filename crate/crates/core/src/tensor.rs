//! Dense row-major `f64` tensors.
//!
//! Layout is batch, channel, row, column for 4-D values and rows, columns for
//! 2-D values. A tensor optionally carries a gradient buffer of the same
//! shape; gradients are filled in by [`crate::graph::Graph::backward`] and
//! copied back onto parameter tensors by [`crate::params::ParamSet`].

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("has_grad", &self.grad.is_some())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as trainable.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} does not fit shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `grad` into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        match &mut self.grad {
            Some(existing) if existing.len() == grad.len() => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
                Ok(())
            }
            Some(_) => Err(Error::dim(format!(
                "gradient of length {} does not fit shape {:?}",
                grad.len(),
                self.shape
            ))),
            None => self.set_grad(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    /// Copies sample `n` out of a batched tensor, keeping a leading extent of 1.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let batch = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("cannot index a 0-d tensor"))?;
        if n >= batch {
            return Err(Error::dim(format!("sample {n} out of range for batch {batch}")));
        }
        let per = self.data.len() / batch;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors along a new (or existing unit) leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack an empty list".into()))?;
        let inner: &[usize] = if first.shape.first() == Some(&1) && first.ndim() == 4 {
            &first.shape[1..]
        } else {
            &first.shape
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.numel() != first.numel() || t.shape != first.shape {
                return Err(Error::dim(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(inner);
        Tensor::new(&shape, data)
    }

    /// Mirrors the last axis.
    pub fn flip_horizontal(&self) -> Self {
        let w = *self.shape.last().unwrap_or(&1);
        let mut out = self.clone();
        out.grad = None;
        for (dst, src) in out.data.chunks_mut(w).zip(self.data.chunks(w)) {
            for (i, v) in dst.iter_mut().enumerate() {
                *v = src[w - 1 - i];
            }
        }
        out
    }

    fn spatial(&self) -> Result<(usize, usize, usize)> {
        let l = self.shape.len();
        if l < 2 {
            return Err(Error::dim(format!("resize needs a spatial tensor, got {:?}", self.shape)));
        }
        let (h, w) = (self.shape[l - 2], self.shape[l - 1]);
        Ok((self.data.len() / (h * w).max(1), h, w))
    }

    fn resized(&self, h: usize, w: usize, f: impl Fn(&[f64], usize, (usize, usize), (usize, usize)) -> Vec<f64>) -> Result<Self> {
        let (planes, ih, iw) = self.spatial()?;
        if h == 0 || w == 0 {
            return Err(Error::dim(format!("cannot resize to {h}x{w}")));
        }
        let mut shape = self.shape.clone();
        let l = shape.len();
        shape[l - 2] = h;
        shape[l - 1] = w;
        Tensor::new(&shape, f(&self.data, planes, (ih, iw), (h, w)))
    }

    /// Bilinear resampling of the last two axes (centres aligned).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<Self> {
        self.resized(h, w, crate::graph::bilinear_forward)
    }

    /// Nearest-neighbour resampling of the last two axes; keeps the value set.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Result<Self> {
        self.resized(h, w, crate::graph::nearest)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
