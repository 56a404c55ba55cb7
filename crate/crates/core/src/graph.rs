//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in forward order; `backward` walks them in exact reverse
//! order, so every node's gradient is complete before it is propagated.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Result, TensorError};
use crate::exec::{BnRefs, Exec};
use crate::ops::{self, Activation, BnCache, ConvGeom, BN_EPS, BN_MOMENTUM};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dims, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        idx: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: ParamId,
        var: ParamId,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Sum {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    ChannelMean {
        x: Var,
    },
    /// Channel max and global max pool both route gradients through argmax indices.
    ArgmaxGather {
        x: Var,
        idx: Vec<usize>,
    },
    GlobalAvg {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
    },
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    /// Gradient of a parameter; zero-filled for frozen parameters, `None` if unused.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    /// Stores each gradient in its parameter's `grad` buffer.
    pub fn write_to(self, store: &mut ParamStore) {
        for (id, g) in self.params {
            store.get_mut(id).tensor.grad = Some(g.into_data());
        }
    }
}

/// Running-statistics values computed by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub id: ParamId,
    pub values: Vec<f32>,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    consumed: bool,
    stat_updates: Vec<StatUpdate>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            consumed: false,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    /// Running-statistic updates recorded by train-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Hash of every branch decision taken in the forward pass (ReLU signs and
    /// max selections). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act {
                    x,
                    kind: Activation::Relu,
                } => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { idx, .. } | Op::ArgmaxGather { idx, .. } => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, op: Op, x: Var, out: Tensor) -> Var {
        let rg = self.rg(&[x]);
        self.push(op, Some(out), rg)
    }

    /// Reverse pass from a scalar root. Consumes the tape: a second call fails.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let rd = self.value(root).dims();
        if rd != [1, 1, 1, 1] {
            return Err(TensorError::NonScalarRoot(rd));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out)?;
        }
        self.nodes.clear();
        Ok(out)
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input => {
                out.inputs.insert(Var(i), g);
            }
            Op::Param(id) => {
                let p = self.params.get(*id);
                let g = if p.frozen { Tensor::zeros(g.dims()) } else { g };
                out.params.insert(*id, g);
            }
            Op::Conv { x, w, b, geom } => {
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *geom, &g)?;
                send(*x, cg.input);
                send(*w, cg.weight);
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    let bd = self.value(*b).dims();
                    send(*b, gb.reshape(bd)?);
                }
            }
            Op::MaxPool { x, idx } | Op::ArgmaxGather { x, idx } => {
                send(*x, ops::scatter_to_indices(self.value(*x).dims(), idx, &g));
            }
            Op::Upsample { x } => send(*x, ops::upsample_nearest2x_backward(&g)),
            Op::BnTrain { x, gamma, beta, cache } => {
                let bg = ops::batchnorm_train_backward(&g, self.value(*gamma), cache);
                send(*x, bg.input);
                send(*gamma, bg.gamma.reshape(self.value(*gamma).dims())?);
                send(*beta, bg.beta.reshape(self.value(*beta).dims())?);
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                var,
            } => {
                let bg = ops::batchnorm_eval_backward(
                    &g,
                    self.value(*x),
                    self.value(*gamma),
                    self.params.tensor(*mean),
                    self.params.tensor(*var),
                    BN_EPS,
                );
                send(*x, bg.input);
                send(*gamma, bg.gamma.reshape(self.value(*gamma).dims())?);
                send(*beta, bg.beta.reshape(self.value(*beta).dims())?);
            }
            Op::Act { x, kind } => {
                let y = node.value.as_ref().expect("activation output");
                send(*x, ops::activation_backward(*kind, self.value(*x), y, &g));
            }
            Op::Add { a, b } => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Mul { a, b } => {
                let (ga, gb) = ops::mul_broadcast_backward(self.value(*a), self.value(*b), &g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale { x, c } => send(*x, ops::scale(&g, *c)),
            Op::Sum { x } => {
                send(*x, Tensor::full(self.value(*x).dims(), g.data()[0]));
            }
            Op::Concat { parts } => {
                let chans: Vec<usize> = parts.iter().map(|p| self.value(*p).dims()[1]).collect();
                for (p, gp) in parts.iter().zip(ops::split_channels(&g, &chans)) {
                    send(*p, gp);
                }
            }
            Op::ChannelMean { x } => {
                send(*x, ops::channel_mean_backward(self.value(*x).dims(), &g));
            }
            Op::GlobalAvg { x } => {
                send(*x, ops::global_avg_pool_backward(self.value(*x).dims(), &g));
            }
            Op::Reshape { x } => send(*x, g.reshape(self.value(*x).dims())?),
            Op::Transpose { x } => send(*x, ops::transpose_hw(&g)),
            Op::MatMul { a, b } => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Softmax { x } => {
                let y = node.value.as_ref().expect("softmax output");
                send(*x, ops::softmax_rows_backward(y, &g));
            }
            Op::Mse { pred, target, mask } => {
                let gp = ops::heatmap_mse_backward(self.value(*pred), target, mask, g.data()[0]);
                send(*pred, gp);
            }
        }
        Ok(())
    }
}

impl<'a> Exec for Graph<'a> {
    type V = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t), false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.params.get(id).trainable;
        let v = self.push(Op::Param(id), None, rg);
        self.param_vars.insert(id, v);
        v
    }

    fn dims(&self, v: &Var) -> Dims {
        self.value(*v).dims()
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        let out = ops::conv2d(self.value(*x), self.value(*w), b.map(|b| self.value(*b)), geom)?;
        let mut deps = vec![*x, *w];
        deps.extend(b.copied());
        let rg = self.rg(&deps);
        Ok(self.push(
            Op::Conv {
                x: *x,
                w: *w,
                b: b.copied(),
                geom,
            },
            Some(out),
            rg,
        ))
    }

    fn maxpool2x2(&mut self, x: &Var) -> Result<Var> {
        let (out, idx) = ops::maxpool2x2(self.value(*x))?;
        Ok(self.unary(Op::MaxPool { x: *x, idx }, *x, out))
    }

    fn upsample2x(&mut self, x: &Var) -> Var {
        let out = ops::upsample_nearest2x(self.value(*x));
        self.unary(Op::Upsample { x: *x }, *x, out)
    }

    fn batchnorm(&mut self, x: &Var, bn: &BnRefs) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let rg = self.rg(&[*x, gamma, beta]);
        match self.mode {
            Mode::Train => {
                let (out, cache) = ops::batchnorm_train(self.value(*x), self.value(gamma), self.value(beta), BN_EPS)?;
                let [n, _, h, w] = self.value(*x).dims();
                let mut mean = self.params.tensor(bn.running_mean).data().to_vec();
                let mut var = self.params.tensor(bn.running_var).data().to_vec();
                ops::update_running(&mut mean, &mut var, &cache, n * h * w, BN_MOMENTUM);
                self.stat_updates.push(StatUpdate {
                    id: bn.running_mean,
                    values: mean,
                });
                self.stat_updates.push(StatUpdate {
                    id: bn.running_var,
                    values: var,
                });
                Ok(self.push(
                    Op::BnTrain {
                        x: *x,
                        gamma,
                        beta,
                        cache,
                    },
                    Some(out),
                    rg,
                ))
            }
            Mode::Eval => {
                let out = ops::batchnorm_eval(
                    self.value(*x),
                    self.value(gamma),
                    self.value(beta),
                    self.params.tensor(bn.running_mean),
                    self.params.tensor(bn.running_var),
                    BN_EPS,
                )?;
                Ok(self.push(
                    Op::BnEval {
                        x: *x,
                        gamma,
                        beta,
                        mean: bn.running_mean,
                        var: bn.running_var,
                    },
                    Some(out),
                    rg,
                ))
            }
        }
    }

    fn activation(&mut self, x: &Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(*x), kind);
        self.unary(Op::Act { x: *x, kind }, *x, out)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(self.value(*a), self.value(*b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(Op::Add { a: *a, b: *b }, Some(out), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::mul_broadcast(self.value(*a), self.value(*b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(Op::Mul { a: *a, b: *b }, Some(out), rg))
    }

    fn scale(&mut self, x: &Var, c: f32) -> Var {
        let out = ops::scale(self.value(*x), c);
        self.unary(Op::Scale { x: *x, c }, *x, out)
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.value(*x).sum() as f32);
        self.unary(Op::Sum { x: *x }, *x, out)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = ops::concat_channels(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, Some(out), rg))
    }

    fn channel_mean(&mut self, x: &Var) -> Var {
        let out = ops::channel_mean(self.value(*x));
        self.unary(Op::ChannelMean { x: *x }, *x, out)
    }

    fn channel_max(&mut self, x: &Var) -> Var {
        let (out, idx) = ops::channel_max(self.value(*x));
        self.unary(Op::ArgmaxGather { x: *x, idx }, *x, out)
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let out = ops::global_avg_pool(self.value(*x));
        self.unary(Op::GlobalAvg { x: *x }, *x, out)
    }

    fn global_max_pool(&mut self, x: &Var) -> Var {
        let (out, idx) = ops::global_max_pool(self.value(*x));
        self.unary(Op::ArgmaxGather { x: *x, idx }, *x, out)
    }

    fn reshape(&mut self, x: &Var, dims: Dims) -> Result<Var> {
        let out = self.value(*x).clone().reshape(dims)?;
        Ok(self.unary(Op::Reshape { x: *x }, *x, out))
    }

    fn transpose_hw(&mut self, x: &Var) -> Var {
        let out = ops::transpose_hw(self.value(*x));
        self.unary(Op::Transpose { x: *x }, *x, out)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::matmul(self.value(*a), self.value(*b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(Op::MatMul { a: *a, b: *b }, Some(out), rg))
    }

    fn softmax_rows(&mut self, x: &Var) -> Var {
        let out = ops::softmax_rows(self.value(*x));
        self.unary(Op::Softmax { x: *x }, *x, out)
    }

    fn heatmap_mse(&mut self, pred: &Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let loss = ops::heatmap_mse(self.value(*pred), target, mask)?;
        Ok(self.unary(
            Op::Mse {
                pred: *pred,
                target: target.clone(),
                mask: mask.to_vec(),
            },
            *pred,
            Tensor::scalar(loss),
        ))
    }
}
