//! The operation set every layer is written against.
//!
//! Layers are generic over [`Exec`], so one forward definition drives three
//! executors: [`Eager`] (inference, frees activations as soon as they go out of
//! scope), [`crate::graph::Graph`] (records a tape for reverse-mode gradients)
//! and [`crate::analysis::Tracer`] (shape-only, counts MACs and liveness).

use std::borrow::Cow;

use crate::error::Result;
use crate::ops::{self, Activation, ConvGeom, BN_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dims, Tensor};

/// Parameter handles of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnRefs {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub trait Exec {
    type V: Clone;

    fn input(&mut self, t: Tensor) -> Self::V;
    fn param(&mut self, id: ParamId) -> Self::V;
    fn dims(&self, v: &Self::V) -> Dims;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, geom: ConvGeom) -> Result<Self::V>;
    fn maxpool2x2(&mut self, x: &Self::V) -> Result<Self::V>;
    fn upsample2x(&mut self, x: &Self::V) -> Self::V;
    fn batchnorm(&mut self, x: &Self::V, bn: &BnRefs) -> Result<Self::V>;
    fn activation(&mut self, x: &Self::V, kind: Activation) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// `a ⊙ b` with `b` broadcast to the dims of `a`.
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f32) -> Self::V;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    fn concat_channels(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn channel_mean(&mut self, x: &Self::V) -> Self::V;
    fn channel_max(&mut self, x: &Self::V) -> Self::V;
    fn global_avg_pool(&mut self, x: &Self::V) -> Self::V;
    fn global_max_pool(&mut self, x: &Self::V) -> Self::V;
    fn reshape(&mut self, x: &Self::V, dims: Dims) -> Result<Self::V>;
    fn transpose_hw(&mut self, x: &Self::V) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn softmax_rows(&mut self, x: &Self::V) -> Self::V;
    /// Scalar visibility-masked heatmap MSE against a constant target.
    fn heatmap_mse(&mut self, pred: &Self::V, target: &Tensor, mask: &[bool]) -> Result<Self::V>;

    fn relu(&mut self, x: &Self::V) -> Self::V {
        self.activation(x, Activation::Relu)
    }

    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        self.activation(x, Activation::Sigmoid)
    }

    /// Names the layer that the following operations belong to.
    fn push_scope(&mut self, _name: &str) {}
    fn pop_scope(&mut self) {}
}

/// Eval-mode executor without a tape. Parameters are borrowed, never copied.
pub struct Eager<'a> {
    params: &'a ParamStore,
}

impl<'a> Eager<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params }
    }
}

type Val<'a> = Cow<'a, Tensor>;

impl<'a> Exec for Eager<'a> {
    type V = Val<'a>;

    fn input(&mut self, t: Tensor) -> Val<'a> {
        Cow::Owned(t)
    }

    fn param(&mut self, id: ParamId) -> Val<'a> {
        Cow::Borrowed(self.params.tensor(id))
    }

    fn dims(&self, v: &Val<'a>) -> Dims {
        v.dims()
    }

    fn conv2d(&mut self, x: &Val<'a>, w: &Val<'a>, b: Option<&Val<'a>>, geom: ConvGeom) -> Result<Val<'a>> {
        ops::conv2d(x, w, b.map(|b| b.as_ref()), geom).map(Cow::Owned)
    }

    fn maxpool2x2(&mut self, x: &Val<'a>) -> Result<Val<'a>> {
        ops::maxpool2x2(x).map(|(t, _)| Cow::Owned(t))
    }

    fn upsample2x(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::upsample_nearest2x(x))
    }

    fn batchnorm(&mut self, x: &Val<'a>, bn: &BnRefs) -> Result<Val<'a>> {
        let p = self.params;
        ops::batchnorm_eval(
            x,
            p.tensor(bn.gamma),
            p.tensor(bn.beta),
            p.tensor(bn.running_mean),
            p.tensor(bn.running_var),
            BN_EPS,
        )
        .map(Cow::Owned)
    }

    fn activation(&mut self, x: &Val<'a>, kind: Activation) -> Val<'a> {
        Cow::Owned(ops::activation(x, kind))
    }

    fn add(&mut self, a: &Val<'a>, b: &Val<'a>) -> Result<Val<'a>> {
        ops::add(a, b).map(Cow::Owned)
    }

    fn mul(&mut self, a: &Val<'a>, b: &Val<'a>) -> Result<Val<'a>> {
        ops::mul_broadcast(a, b).map(Cow::Owned)
    }

    fn scale(&mut self, x: &Val<'a>, c: f32) -> Val<'a> {
        Cow::Owned(ops::scale(x, c))
    }

    fn sum(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(Tensor::scalar(x.sum() as f32))
    }

    fn concat_channels(&mut self, parts: &[Val<'a>]) -> Result<Val<'a>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        ops::concat_channels(&refs).map(Cow::Owned)
    }

    fn channel_mean(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::channel_mean(x))
    }

    fn channel_max(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::channel_max(x).0)
    }

    fn global_avg_pool(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::global_avg_pool(x))
    }

    fn global_max_pool(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::global_max_pool(x).0)
    }

    fn reshape(&mut self, x: &Val<'a>, dims: Dims) -> Result<Val<'a>> {
        x.as_ref().clone().reshape(dims).map(Cow::Owned)
    }

    fn transpose_hw(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::transpose_hw(x))
    }

    fn matmul(&mut self, a: &Val<'a>, b: &Val<'a>) -> Result<Val<'a>> {
        ops::matmul(a, b).map(Cow::Owned)
    }

    fn softmax_rows(&mut self, x: &Val<'a>) -> Val<'a> {
        Cow::Owned(ops::softmax_rows(x))
    }

    fn heatmap_mse(&mut self, pred: &Val<'a>, target: &Tensor, mask: &[bool]) -> Result<Val<'a>> {
        ops::heatmap_mse(pred, target, mask).map(|l| Cow::Owned(Tensor::scalar(l)))
    }
}
