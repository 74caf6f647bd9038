//! Dense `f32` tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens on
//! a [`Graph`]: every operation appends a node holding its output, and
//! [`Graph::backward`] walks the nodes in reverse to accumulate gradients.
//! The graph is rebuilt on every forward pass.

mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} must have positive dimensions"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("positive shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    /// Standard normal entries multiplied by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::new(shape, data).expect("positive shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("positive shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of bounds for axis {i} of size {d}");
            flat = flat * d + x;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f32 {
        self.data.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("mse", &self.shape, &other.shape));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        Ok((s / self.data.len() as f64) as f32)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Bilinear resampling of a `[C, H, W]` tensor (no gradient tracking).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (c, h, w) = self.chw("resize_bilinear")?;
        let out = kernels::bilinear_forward(&self.data, c, h, w, out_h, out_w);
        Tensor::new(&[c, out_h, out_w], out)
    }

    /// Area (adaptive average) resampling of a `[C, H, W]` tensor.
    pub fn resize_area(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (c, h, w) = self.chw("resize_area")?;
        let out = kernels::area_forward(&self.data, c, h, w, out_h, out_w);
        Tensor::new(&[c, out_h, out_w], out)
    }

    /// Mean over the cells of a partition of the `[C, H, W]` grid into
    /// `out_h × out_w` contiguous blocks. Requires `out <= in` per axis.
    pub fn cell_mean(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (c, h, w) = self.chw("cell_mean")?;
        if out_h > h || out_w > w {
            return Err(Error::shape("cell_mean", self.shape(), &[c, out_h, out_w]));
        }
        Tensor::new(&[c, out_h, out_w], kernels::cell_mean_forward(&self.data, c, h, w, out_h, out_w))
    }

    /// Nearest-neighbour expansion onto the same partition [`Tensor::cell_mean`]
    /// uses, so `x.expand_cells(H, W).cell_mean(h, w) == x`.
    pub fn expand_cells(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (c, h, w) = self.chw("expand_cells")?;
        if out_h < h || out_w < w {
            return Err(Error::shape("expand_cells", self.shape(), &[c, out_h, out_w]));
        }
        Tensor::new(&[c, out_h, out_w], kernels::nearest_forward(&self.data, c, h, w, out_h, out_w))
    }

    pub(crate) fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(op, other, &[0, 0, 0])),
        }
    }
}
