//! Dense rank-4 single-precision tensors in (N, C, H, W) row-major order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{mismatch, Result};

/// Extents of a rank-4 tensor: (N, C, H, W).
pub type Dims = [usize; 4];

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
    /// Gradient buffer, filled for parameters after a backward pass.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(mismatch("Tensor::new", format!("zero extent in {dims:?}")));
        }
        if data.len() != numel(dims) {
            return Err(mismatch(
                "Tensor::new",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(Self { dims, data, grad: None })
    }

    /// Internal constructor for kernels that already sized `data` correctly.
    pub(crate) fn from_parts(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), numel(dims));
        Self { dims, data, grad: None }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Self::from_parts(dims, vec![value; numel(dims)])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts([1, 1, 1, 1], vec![value])
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: Dims, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..numel(dims)).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(dims, data)
    }

    pub fn randn<R: Rng + ?Sized>(dims: Dims, std: f32, rng: &mut R) -> Self {
        let data = (0..numel(dims))
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_parts(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Same data under new extents with equal element count.
    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {dims:?} changes element count", self.dims),
            ));
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    /// Contiguous view of sample `n` (C·H·W elements).
    pub fn sample(&self, n: usize) -> &[f32] {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * per..(n + 1) * per]
    }

    /// Contiguous H·W plane of channel `c` in sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| mismatch("stack", "no tensors given"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in parts {
            if t.dims[1..] != [c, h, w] {
                return Err(mismatch("stack", format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts([n, c, h, w], data))
    }

    /// Copies sample `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.dims;
        Self::from_parts([1, c, h, w], self.sample(n).to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
