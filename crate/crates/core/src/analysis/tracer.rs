//! Shape-only executor that records every operation.

use std::collections::BTreeSet;

use crate::error::{mismatch, Result};
use crate::exec::{BnRefs, Exec};
use crate::ops::{self, Activation, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Dims, Tensor};

/// Handle to a traced value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TVar(usize);

impl TVar {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    Param,
    Op,
}

/// One recorded value: an input, a parameter reference or an operation output.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceNode {
    pub kind: NodeKind,
    pub op: &'static str,
    pub scope: String,
    pub dims: Dims,
    /// Activation inputs; parameters are listed in `params`.
    pub inputs: Vec<usize>,
    pub params: Vec<ParamId>,
    pub macs: u64,
    pub elem_ops: u64,
}

pub struct Tracer<'a> {
    store: &'a ParamStore,
    pub nodes: Vec<TraceNode>,
    scopes: Vec<String>,
}

pub const ROOT_SCOPE: &str = "(root)";

impl<'a> Tracer<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            scopes: Vec::new(),
        }
    }

    /// Input placeholder without allocating data.
    pub fn input_dims(&mut self, dims: Dims) -> TVar {
        self.push(NodeKind::Input, "input", dims, &[], 0, 0)
    }

    pub fn scope(&self) -> &str {
        self.scopes.last().map_or(ROOT_SCOPE, |s| s.as_str())
    }

    fn push(&mut self, kind: NodeKind, op: &'static str, dims: Dims, args: &[TVar], macs: u64, elem_ops: u64) -> TVar {
        let mut inputs = Vec::new();
        let mut params = BTreeSet::new();
        for a in args {
            let n = &self.nodes[a.0];
            match n.kind {
                NodeKind::Param => {
                    params.extend(n.params.iter().copied());
                }
                _ => inputs.push(a.0),
            }
        }
        let scope = self.scope().to_string();
        self.nodes.push(TraceNode {
            kind,
            op,
            scope,
            dims,
            inputs,
            params: params.into_iter().collect(),
            macs,
            elem_ops,
        });
        TVar(self.nodes.len() - 1)
    }

    fn d(&self, v: &TVar) -> Dims {
        self.nodes[v.0].dims
    }

    fn elementwise(&mut self, op: &'static str, args: &[TVar]) -> TVar {
        let dims = self.d(&args[0]);
        self.push(NodeKind::Op, op, dims, args, 0, numel(dims) as u64)
    }

    /// Reduction to `out`; element ops count the input size.
    fn reduce(&mut self, op: &'static str, x: &TVar, out: Dims) -> TVar {
        let n = numel(self.d(x)) as u64;
        self.push(NodeKind::Op, op, out, &[*x], 0, n)
    }
}

impl<'a> Exec for Tracer<'a> {
    type V = TVar;

    fn input(&mut self, t: Tensor) -> TVar {
        self.input_dims(t.dims())
    }

    fn param(&mut self, id: ParamId) -> TVar {
        let dims = self.store.tensor(id).dims();
        let v = self.push(NodeKind::Param, "param", dims, &[], 0, 0);
        self.nodes[v.0].params.push(id);
        v
    }

    fn dims(&self, v: &TVar) -> Dims {
        self.d(v)
    }

    fn conv2d(&mut self, x: &TVar, w: &TVar, b: Option<&TVar>, geom: ConvGeom) -> Result<TVar> {
        let bias_len = b.map(|b| numel(self.d(b)));
        let out = ops::conv2d_dims(self.d(x), self.d(w), bias_len, geom)?;
        let macs = ops::conv2d_macs(out, self.d(w));
        let mut args = vec![*x, *w];
        args.extend(b.copied());
        Ok(self.push(NodeKind::Op, "conv2d", out, &args, macs, 0))
    }

    fn maxpool2x2(&mut self, x: &TVar) -> Result<TVar> {
        let out = ops::maxpool2x2_dims(self.d(x))?;
        Ok(self.reduce("maxpool2x2", x, out))
    }

    fn upsample2x(&mut self, x: &TVar) -> TVar {
        let [n, c, h, w] = self.d(x);
        let out = [n, c, 2 * h, 2 * w];
        self.push(NodeKind::Op, "upsample2x", out, &[*x], 0, numel(out) as u64)
    }

    fn batchnorm(&mut self, x: &TVar, bn: &BnRefs) -> Result<TVar> {
        let c = self.d(x)[1];
        for id in [bn.gamma, bn.beta, bn.running_mean, bn.running_var] {
            if self.store.tensor(id).numel() != c {
                return Err(mismatch("batchnorm", format!("parameter length vs {c} channels")));
            }
        }
        let params: Vec<TVar> = [bn.gamma, bn.beta, bn.running_mean, bn.running_var]
            .into_iter()
            .map(|id| self.param(id))
            .collect();
        let mut args = vec![*x];
        args.extend(params);
        Ok(self.elementwise("batchnorm", &args))
    }

    fn activation(&mut self, x: &TVar, kind: Activation) -> TVar {
        let op = match kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        };
        self.elementwise(op, &[*x])
    }

    fn add(&mut self, a: &TVar, b: &TVar) -> Result<TVar> {
        if self.d(a) != self.d(b) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.d(a), self.d(b))));
        }
        Ok(self.elementwise("add", &[*a, *b]))
    }

    fn mul(&mut self, a: &TVar, b: &TVar) -> Result<TVar> {
        if !ops::broadcastable(self.d(a), self.d(b)) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.d(b), self.d(a))));
        }
        Ok(self.elementwise("mul", &[*a, *b]))
    }

    fn scale(&mut self, x: &TVar, _c: f32) -> TVar {
        self.elementwise("scale", &[*x])
    }

    fn sum(&mut self, x: &TVar) -> TVar {
        self.reduce("sum", x, [1, 1, 1, 1])
    }

    fn concat_channels(&mut self, parts: &[TVar]) -> Result<TVar> {
        let first = self.d(&parts[0]);
        let mut c = 0;
        for p in parts {
            let d = self.d(p);
            if d[0] != first[0] || d[2..] != first[2..] {
                return Err(mismatch("concat_channels", format!("{d:?} vs {first:?}")));
            }
            c += d[1];
        }
        let out = [first[0], c, first[2], first[3]];
        Ok(self.push(NodeKind::Op, "concat", out, parts, 0, numel(out) as u64))
    }

    fn channel_mean(&mut self, x: &TVar) -> TVar {
        let [n, _, h, w] = self.d(x);
        self.reduce("channel_mean", x, [n, 1, h, w])
    }

    fn channel_max(&mut self, x: &TVar) -> TVar {
        let [n, _, h, w] = self.d(x);
        self.reduce("channel_max", x, [n, 1, h, w])
    }

    fn global_avg_pool(&mut self, x: &TVar) -> TVar {
        let [n, c, _, _] = self.d(x);
        self.reduce("global_avg_pool", x, [n, c, 1, 1])
    }

    fn global_max_pool(&mut self, x: &TVar) -> TVar {
        let [n, c, _, _] = self.d(x);
        self.reduce("global_max_pool", x, [n, c, 1, 1])
    }

    fn reshape(&mut self, x: &TVar, dims: Dims) -> Result<TVar> {
        if numel(dims) != numel(self.d(x)) {
            return Err(mismatch("reshape", format!("{:?} to {dims:?}", self.d(x))));
        }
        Ok(self.push(NodeKind::Op, "reshape", dims, &[*x], 0, 0))
    }

    fn transpose_hw(&mut self, x: &TVar) -> TVar {
        let [n, c, h, w] = self.d(x);
        self.push(NodeKind::Op, "transpose", [n, c, w, h], &[*x], 0, 0)
    }

    fn matmul(&mut self, a: &TVar, b: &TVar) -> Result<TVar> {
        let out = ops::matmul_dims(self.d(a), self.d(b))?;
        let macs = (numel(out) * self.d(a)[3]) as u64;
        Ok(self.push(NodeKind::Op, "matmul", out, &[*a, *b], macs, 0))
    }

    fn softmax_rows(&mut self, x: &TVar) -> TVar {
        self.elementwise("softmax", &[*x])
    }

    fn heatmap_mse(&mut self, pred: &TVar, target: &Tensor, _mask: &[bool]) -> Result<TVar> {
        if self.d(pred) != target.dims() {
            return Err(mismatch("heatmap_mse", "pred and target differ"));
        }
        Ok(self.reduce("heatmap_mse", pred, [1, 1, 1, 1]))
    }

    fn push_scope(&mut self, name: &str) {
        self.scopes.push(name.to_string());
    }

    fn pop_scope(&mut self) {
        self.scopes.pop();
    }
}
