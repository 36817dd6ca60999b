use std::collections::HashMap;
use std::fmt;

use crate::error::{DiffError, Result};
use crate::kernels::{self, BnLayout, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Momentum of the batch-norm running statistics: `running <- m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            requires_grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Running mean and (unbiased) variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Node kinds. Every node's inputs precede it, so construction order is a
/// topological order.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Externally bound tensor.
    Input(String),
    /// The current value of a parameter.
    Param(ParamId),
    /// `(B, in) -> (B, out)` with weight `(out, in)` and optional bias `(out)`.
    Affine { weight: ParamId, bias: Option<ParamId> },
    /// `(B, C, H, W) -> (B, O, H', W')` with weight `(O, C, k, k)`, no bias.
    Conv2d { weight: ParamId, stride: usize, padding: usize },
    /// 1-D for rank-2 inputs, 2-D for rank-4 inputs.
    BatchNorm { gamma: ParamId, beta: ParamId, stats: StatsId },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    /// `(B, C, H, W) -> (B, C)`.
    GlobalAvgPool,
    /// `(B, ...) -> (B, prod(...))`.
    Flatten,
    Reshape(Vec<usize>),
    /// Row-wise unit normalization of a `(B, d)` input.
    L2Normalize,
    /// Row-wise inner product of two `(B, d)` inputs, giving `(B)`.
    RowDot,
    /// Mean of all elements, giving a scalar.
    Mean,
    /// Identity forward, zero gradient backward.
    StopGrad,
    /// Elementwise sum of two same-shape inputs.
    Add,
    Scale(f64),
    /// `mean((a - b)^2)` over all elements.
    MseLoss,
    /// Mean softmax cross-entropy of `(B, K)` logits against `(B)` integer labels.
    SoftmaxCrossEntropy,
    /// Value supplied by a caller hook from its inputs' values; no gradient flows.
    External(String),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::Reshape(_) => "reshape",
            Op::L2Normalize => "l2_normalize",
            Op::RowDot => "row_dot",
            Op::Mean => "mean",
            Op::StopGrad => "stop_grad",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::MseLoss => "mse_loss",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::External(_) => "external",
        }
    }

    fn blocks_gradient(&self) -> bool {
        matches!(self, Op::Input(_) | Op::StopGrad | Op::External(_))
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named input bindings for an evaluation.
pub type Inputs<'a, T> = [(&'a str, &'a Tensor<T>)];

/// Supplies values of [`Op::External`] nodes: `(key, input values) -> value`.
pub type ExternalHook<'h, T> = dyn FnMut(&str, &[&Tensor<T>]) -> Result<Tensor<T>> + 'h;

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Pool(Vec<usize>),
    Norms(Vec<T>),
    Probs { probs: Vec<T>, labels: Vec<usize> },
}

struct Pass<T> {
    values: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
    stat_updates: Vec<(StatsId, Vec<T>, Vec<T>)>,
}

struct Cache<T> {
    values: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

/// Static computation graph owning its parameters and batch-norm statistics.
pub struct Graph<T> {
    nodes: Vec<Node>,
    params: Vec<Parameter<T>>,
    stats: Vec<BatchNormStats<T>>,
    names: HashMap<String, NodeId>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .field("stats", &self.stats.len())
            .finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
            names: HashMap::new(),
            cache: None,
        }
    }

    // ---- construction -------------------------------------------------

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name, value, requires_grad));
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        let name = name.into();
        assert!(
            self.stats.iter().all(|s| s.name != name),
            "duplicate statistics name {name}"
        );
        self.stats.push(BatchNormStats {
            name,
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        let id = NodeId(self.nodes.len());
        for i in inputs {
            assert!(i.0 < id.0, "node inputs must precede the node");
        }
        let arity = match &op {
            Op::Input(_) | Op::Param(_) => 0,
            Op::RowDot | Op::Add | Op::MseLoss | Op::SoftmaxCrossEntropy => 2,
            Op::External(_) => inputs.len(),
            _ => 1,
        };
        assert_eq!(inputs.len(), arity, "{} takes {arity} inputs", op.kind());
        if let Op::Input(name) = &op {
            self.name_node(id, name.clone());
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            name: None,
        });
        self.cache = None;
        id
    }

    /// Registers a lookup name for a node.
    pub fn name_node(&mut self, id: NodeId, name: impl Into<String>) {
        let name = name.into();
        if let Some(node) = self.nodes.get_mut(id.0) {
            node.name = Some(name.clone());
        }
        self.names.insert(name, id);
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), &[])
    }

    pub fn param_node(&mut self, p: ParamId) -> NodeId {
        self.push(Op::Param(p), &[])
    }

    pub fn affine(&mut self, x: NodeId, weight: ParamId, bias: Option<ParamId>) -> NodeId {
        self.push(Op::Affine { weight, bias }, &[x])
    }

    pub fn conv2d(&mut self, x: NodeId, weight: ParamId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d { weight, stride, padding }, &[x])
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, stats: StatsId) -> NodeId {
        self.push(Op::BatchNorm { gamma, beta, stats }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, &[x])
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool2d { kernel, stride }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, &[x])
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten, &[x])
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2Normalize, &[x])
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::RowDot, &[a, b])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, &[x])
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGrad, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), &[x])
    }

    pub fn external(&mut self, key: &str, inputs: &[NodeId]) -> NodeId {
        self.push(Op::External(key.to_string()), inputs)
    }

    // ---- accessors ----------------------------------------------------

    /// Value of `id` from the last training-mode evaluation, if it was computed.
    pub fn cached_value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.cache.as_ref()?.values.get(id.0)?.as_ref()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownNode(name.to_string()))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn stats(&self) -> &[BatchNormStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [BatchNormStats<T>] {
        &mut self.stats
    }

    pub fn stats_id(&self, name: &str) -> Option<StatsId> {
        self.stats.iter().position(|s| s.name == name).map(StatsId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Number of scalar entries over all trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.name {
            Some(n) => format!("#{} {} `{n}`", id.0, node.op.kind()),
            None => format!("#{} {}", id.0, node.op.kind()),
        }
    }

    fn shape_err(&self, id: NodeId, detail: impl Into<String>) -> DiffError {
        DiffError::Shape {
            node: self.describe(id),
            detail: detail.into(),
        }
    }

    fn ancestors(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = outputs.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id.0] {
                continue;
            }
            needed[id.0] = true;
            stack.extend(self.nodes[id.0].inputs.iter().copied());
        }
        needed
    }

    // ---- evaluation ---------------------------------------------------

    /// Evaluates the requested nodes. In training mode batch norm uses batch
    /// statistics and updates the running statistics, and activations are
    /// retained for [`Graph::backward`].
    pub fn evaluate(&mut self, inputs: &Inputs<'_, T>, outputs: &[NodeId], mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.evaluate_with(inputs, outputs, mode, &mut |key: &str, _: &[&Tensor<T>]| {
            Err(DiffError::InvalidArgument(format!("no hook bound for external node `{key}`")))
        })
    }

    pub fn evaluate_with(
        &mut self,
        inputs: &Inputs<'_, T>,
        outputs: &[NodeId],
        mode: Mode,
        hook: &mut ExternalHook<'_, T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.evaluate_pinned(inputs, outputs, mode, hook, &[])
    }

    /// [`Graph::evaluate_with`] where each `(node, value)` pin replaces that
    /// node's computed value. Pinning the gradient-blocking nodes turns the
    /// loss into the function whose derivative backward computes.
    pub fn evaluate_pinned(
        &mut self,
        inputs: &Inputs<'_, T>,
        outputs: &[NodeId],
        mode: Mode,
        hook: &mut ExternalHook<'_, T>,
        pins: &[(NodeId, Tensor<T>)],
    ) -> Result<Vec<Tensor<T>>> {
        self.cache = None;
        let pass = self.run(inputs, outputs, mode, hook, pins)?;
        for (sid, mean, var) in pass.stat_updates {
            let m = T::of(BN_MOMENTUM);
            let s = &mut self.stats[sid.0];
            for (r, b) in s.mean.data_mut().iter_mut().zip(mean) {
                *r = m * *r + (T::one() - m) * b;
            }
            for (r, b) in s.var.data_mut().iter_mut().zip(var) {
                *r = m * *r + (T::one() - m) * b;
            }
        }
        let result = outputs
            .iter()
            .map(|id| pass.values[id.0].clone().expect("requested node evaluated"))
            .collect();
        if mode == Mode::Train {
            self.cache = Some(Cache {
                values: pass.values,
                aux: pass.aux,
            });
        }
        Ok(result)
    }

    /// Evaluation-mode forward pass on frozen state. Takes `&self`, so
    /// several lanes may share one graph.
    pub fn infer(&self, inputs: &Inputs<'_, T>, outputs: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        let mut hook = |key: &str, _: &[&Tensor<T>]| -> Result<Tensor<T>> {
            Err(DiffError::InvalidArgument(format!("no hook bound for external node `{key}`")))
        };
        self.infer_with(inputs, outputs, &mut hook)
    }

    /// [`Graph::infer`] with a hook for external nodes.
    pub fn infer_with(
        &self,
        inputs: &Inputs<'_, T>,
        outputs: &[NodeId],
        hook: &mut ExternalHook<'_, T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut pass = self.run(inputs, outputs, Mode::Eval, hook, &[])?;
        Ok(outputs
            .iter()
            .map(|id| pass.values[id.0].take().expect("requested node evaluated"))
            .collect())
    }

    fn run(
        &self,
        inputs: &Inputs<'_, T>,
        outputs: &[NodeId],
        mode: Mode,
        hook: &mut ExternalHook<'_, T>,
        pins: &[(NodeId, Tensor<T>)],
    ) -> Result<Pass<T>> {
        let needed = self.ancestors(outputs);
        let n = self.nodes.len();
        let mut pass = Pass {
            values: vec![None; n],
            aux: vec![Aux::None; n],
            stat_updates: Vec::new(),
        };
        for idx in 0..n {
            if !needed[idx] {
                continue;
            }
            let id = NodeId(idx);
            if let Some((_, v)) = pins.iter().find(|(p, _)| *p == id) {
                pass.values[idx] = Some(v.clone());
                continue;
            }
            let (value, aux) = self.forward_node(id, &pass.values, inputs, mode, hook, &mut pass.stat_updates)?;
            if !value.is_finite() {
                return Err(DiffError::NonFinite { node: self.describe(id) });
            }
            pass.values[idx] = Some(value);
            pass.aux[idx] = aux;
        }
        Ok(pass)
    }

    fn forward_node(
        &self,
        id: NodeId,
        values: &[Option<Tensor<T>>],
        inputs: &Inputs<'_, T>,
        mode: Mode,
        hook: &mut ExternalHook<'_, T>,
        stat_updates: &mut Vec<(StatsId, Vec<T>, Vec<T>)>,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let node = &self.nodes[id.0];
        let arg = |i: usize| -> &Tensor<T> { values[node.inputs[i].0].as_ref().expect("inputs evaluated first") };
        let out = match &node.op {
            Op::Input(name) => {
                let t = inputs
                    .iter()
                    .find(|(k, _)| k == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| DiffError::MissingInput(name.clone()))?;
                (t, Aux::None)
            }
            Op::Param(p) => (self.params[p.0].value.clone(), Aux::None),
            Op::Affine { weight, bias } => {
                let x = arg(0);
                let w = &self.params[weight.0].value;
                if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
                    return Err(self.shape_err(
                        id,
                        format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
                    ));
                }
                let (batch, in_dim, out_dim) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let b = match bias {
                    Some(b) => {
                        let b = &self.params[b.0].value;
                        if b.shape() != [out_dim] {
                            return Err(self.shape_err(id, format!("bias {:?} for {out_dim} outputs", b.shape())));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                let y = kernels::affine_forward(x.data(), batch, in_dim, w.data(), b, out_dim);
                (Tensor::new(vec![batch, out_dim], y)?, Aux::None)
            }
            Op::Conv2d { weight, stride, padding } => {
                let x = arg(0);
                let w = &self.params[weight.0].value;
                let g = self.conv_geom(id, x, w, *stride, *padding)?;
                let y = kernels::conv2d_forward(x.data(), x.shape()[0], w.data(), &g);
                (
                    Tensor::new(vec![x.shape()[0], g.out_channels, g.out_height, g.out_width], y)?,
                    Aux::None,
                )
            }
            Op::BatchNorm { gamma, beta, stats } => {
                let x = arg(0);
                let layout = self.bn_layout(id, x)?;
                let gamma = self.params[gamma.0].value.data();
                let beta = self.params[beta.0].value.data();
                if gamma.len() != layout.channels || beta.len() != layout.channels {
                    return Err(self.shape_err(
                        id,
                        format!("{} channels but affine parameters of length {}", layout.channels, gamma.len()),
                    ));
                }
                match mode {
                    Mode::Train => {
                        if layout.count() < 2 {
                            return Err(self.shape_err(id, "training-mode batch norm needs at least 2 values per channel"));
                        }
                        let f = kernels::batchnorm_train_forward(x.data(), &layout, gamma, beta, T::of(BN_EPS));
                        stat_updates.push((*stats, f.batch_mean, f.batch_var_unbiased));
                        (
                            Tensor::new(x.shape().to_vec(), f.y)?,
                            Aux::BatchNorm { xhat: f.xhat, inv_std: f.inv_std, training: true },
                        )
                    }
                    Mode::Eval => {
                        let s = &self.stats[stats.0];
                        let (y, xhat, inv_std) = kernels::batchnorm_eval_forward(
                            x.data(),
                            &layout,
                            gamma,
                            beta,
                            s.mean.data(),
                            s.var.data(),
                            T::of(BN_EPS),
                        );
                        (
                            Tensor::new(x.shape().to_vec(), y)?,
                            Aux::BatchNorm { xhat, inv_std, training: false },
                        )
                    }
                }
            }
            Op::Relu => (arg(0).map(|v| v.max(T::zero())), Aux::None),
            Op::MaxPool2d { kernel, stride } => {
                let x = arg(0);
                if x.rank() != 4 || *kernel == 0 || *stride == 0 || x.shape()[2] < *kernel || x.shape()[3] < *kernel {
                    return Err(self.shape_err(id, format!("cannot pool {:?} with kernel {kernel}", x.shape())));
                }
                let s = x.shape();
                let oh = (s[2] - kernel) / stride + 1;
                let ow = (s[3] - kernel) / stride + 1;
                let (y, arg) = kernels::maxpool_forward(x.data(), s[0] * s[1], s[2], s[3], *kernel, *stride, oh, ow);
                (Tensor::new(vec![s[0], s[1], oh, ow], y)?, Aux::Pool(arg))
            }
            Op::GlobalAvgPool => {
                let x = arg(0);
                if x.rank() != 4 {
                    return Err(self.shape_err(id, format!("expected (B, C, H, W), got {:?}", x.shape())));
                }
                let s = x.shape();
                let plane = s[2] * s[3];
                let inv = T::of(1.0 / plane as f64);
                let y = x.data().chunks_exact(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
                (Tensor::new(vec![s[0], s[1]], y)?, Aux::None)
            }
            Op::Flatten => {
                let x = arg(0);
                if x.rank() == 0 {
                    return Err(self.shape_err(id, "cannot flatten a scalar"));
                }
                let b = x.shape()[0];
                (x.clone().reshape(&[b, x.len() / b])?, Aux::None)
            }
            Op::Reshape(shape) => {
                let x = arg(0);
                let t = x
                    .clone()
                    .reshape(shape)
                    .map_err(|_| self.shape_err(id, format!("cannot reshape {:?} into {shape:?}", x.shape())))?;
                (t, Aux::None)
            }
            Op::L2Normalize => {
                let x = arg(0);
                if x.rank() != 2 {
                    return Err(self.shape_err(id, format!("expected (B, d), got {:?}", x.shape())));
                }
                let d = x.shape()[1];
                let mut norms = Vec::with_capacity(x.shape()[0]);
                let mut y = Vec::with_capacity(x.len());
                for (row_idx, row) in x.data().chunks_exact(d).enumerate() {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm.as_f64() < 1e-12 {
                        return Err(DiffError::ZeroNorm { node: self.describe(id), row: row_idx });
                    }
                    y.extend(row.iter().map(|&v| v / norm));
                    norms.push(norm);
                }
                (Tensor::new(x.shape().to_vec(), y)?, Aux::Norms(norms))
            }
            Op::RowDot => {
                let (a, b) = (arg(0), arg(1));
                if a.rank() != 2 || a.shape() != b.shape() {
                    return Err(self.shape_err(id, format!("operands {:?} and {:?}", a.shape(), b.shape())));
                }
                let d = a.shape()[1];
                let y = a
                    .data()
                    .chunks_exact(d)
                    .zip(b.data().chunks_exact(d))
                    .map(|(r, s)| r.iter().zip(s).map(|(&u, &v)| u * v).sum::<T>())
                    .collect();
                (Tensor::new(vec![a.shape()[0]], y)?, Aux::None)
            }
            Op::Mean => {
                let x = arg(0);
                let m = x.data().iter().copied().sum::<T>() / T::of(x.len() as f64);
                (Tensor::scalar(m), Aux::None)
            }
            Op::StopGrad => (arg(0).clone(), Aux::None),
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(id, format!("operands {:?} and {:?}", a.shape(), b.shape())));
                }
                let mut y = a.clone();
                y.add_assign(b);
                (y, Aux::None)
            }
            Op::Scale(f) => {
                let f = T::of(*f);
                (arg(0).map(|v| v * f), Aux::None)
            }
            Op::MseLoss => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(id, format!("prediction {:?} vs target {:?}", a.shape(), b.shape())));
                }
                let s = a.data().iter().zip(b.data()).map(|(&u, &v)| (u - v) * (u - v)).sum::<T>();
                (Tensor::scalar(s / T::of(a.len() as f64)), Aux::None)
            }
            Op::SoftmaxCrossEntropy => {
                let (logits, labels) = (arg(0), arg(1));
                if logits.rank() != 2 || labels.shape() != [logits.shape()[0]] {
                    return Err(self.shape_err(
                        id,
                        format!("logits {:?} with labels {:?}", logits.shape(), labels.shape()),
                    ));
                }
                let classes = logits.shape()[1];
                let labels: Vec<usize> = labels
                    .data()
                    .iter()
                    .map(|&v| {
                        let l = v.as_f64();
                        if l >= 0.0 && l.fract() == 0.0 && (l as usize) < classes {
                            Ok(l as usize)
                        } else {
                            Err(self.shape_err(id, format!("label {l} outside 0..{classes}")))
                        }
                    })
                    .collect::<Result<_>>()?;
                let (loss, probs) = kernels::softmax_xent_forward(logits.data(), classes, &labels);
                (Tensor::scalar(loss), Aux::Probs { probs, labels })
            }
            Op::External(key) => {
                let args: Vec<&Tensor<T>> = (0..node.inputs.len()).map(arg).collect();
                (hook(key, &args)?, Aux::None)
            }
        };
        Ok(out)
    }

    fn conv_geom(&self, id: NodeId, x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<ConvGeom> {
        if x.rank() != 4 || w.rank() != 4 || w.shape()[2] != w.shape()[3] || x.shape()[1] != w.shape()[1] || stride == 0 {
            return Err(self.shape_err(
                id,
                format!("input {:?} incompatible with kernel {:?} (stride {stride})", x.shape(), w.shape()),
            ));
        }
        let k = w.shape()[2];
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(self.shape_err(id, format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        Ok(ConvGeom {
            channels: x.shape()[1],
            height: h,
            width: wd,
            out_channels: w.shape()[0],
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (wd + 2 * padding - k) / stride + 1,
        })
    }

    fn bn_layout(&self, id: NodeId, x: &Tensor<T>) -> Result<BnLayout> {
        match x.shape() {
            [b, f] => Ok(BnLayout { batch: *b, channels: *f, spatial: 1 }),
            [b, c, h, w] => Ok(BnLayout { batch: *b, channels: *c, spatial: h * w }),
            s => Err(self.shape_err(id, format!("batch norm expects rank 2 or 4, got {s:?}"))),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates `d loss / d param` into every trainable parameter's
    /// gradient. Requires a preceding training-mode evaluation that computed
    /// `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| DiffError::BackwardBeforeForward(self.describe(loss)))?;
        let result = self.backward_from(&cache, loss);
        self.cache = Some(cache);
        result
    }

    fn trainable_nodes(&self) -> Vec<bool> {
        let mut flags = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.blocks_gradient() {
                continue;
            }
            let own = match &node.op {
                Op::Param(p) => self.params[p.0].requires_grad,
                Op::Affine { weight, bias } => {
                    self.params[weight.0].requires_grad || bias.is_some_and(|b| self.params[b.0].requires_grad)
                }
                Op::Conv2d { weight, .. } => self.params[weight.0].requires_grad,
                Op::BatchNorm { gamma, beta, .. } => {
                    self.params[gamma.0].requires_grad || self.params[beta.0].requires_grad
                }
                _ => false,
            };
            flags[i] = own || node.inputs.iter().any(|j| flags[j.0]);
        }
        flags
    }

    fn backward_from(&mut self, cache: &Cache<T>, loss: NodeId) -> Result<()> {
        let loss_value = cache.values[loss.0]
            .as_ref()
            .ok_or_else(|| DiffError::BackwardBeforeForward(self.describe(loss)))?;
        if loss_value.len() != 1 {
            return Err(DiffError::NotScalar {
                node: self.describe(loss),
                shape: loss_value.shape().to_vec(),
            });
        }
        let trainable = self.trainable_nodes();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !trainable[idx] {
                continue;
            }
            let node = self.nodes[idx].clone();
            let value = |i: usize| -> &Tensor<T> { cache.values[node.inputs[i].0].as_ref().expect("cached input") };
            let wants = |i: usize| trainable[node.inputs[i].0];
            let mut input_grads: Vec<Option<Tensor<T>>> = vec![None; node.inputs.len()];
            match &node.op {
                Op::Input(_) | Op::StopGrad | Op::External(_) => {}
                Op::Param(p) => {
                    let param = &mut self.params[p.0];
                    if param.requires_grad {
                        param.grad.add_assign(&dy);
                    }
                }
                Op::Affine { weight, bias } => {
                    let x = value(0);
                    let (batch, in_dim) = (x.shape()[0], x.shape()[1]);
                    let out_dim = dy.shape()[1];
                    let w = self.params[weight.0].value.clone();
                    let mut dw = self.params[weight.0].requires_grad.then(|| Tensor::<T>::zeros(w.shape()));
                    let mut db = bias
                        .filter(|b| self.params[b.0].requires_grad)
                        .map(|b| Tensor::<T>::zeros(self.params[b.0].value.shape()));
                    let dx = kernels::affine_backward(
                        dy.data(),
                        x.data(),
                        w.data(),
                        batch,
                        in_dim,
                        out_dim,
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        wants(0),
                    );
                    if let Some(dw) = dw {
                        self.params[weight.0].grad.add_assign(&dw);
                    }
                    if let (Some(db), Some(b)) = (db, bias) {
                        self.params[b.0].grad.add_assign(&db);
                    }
                    input_grads[0] = dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
                }
                Op::Conv2d { weight, stride, padding } => {
                    let x = value(0);
                    let w = self.params[weight.0].value.clone();
                    let g = self.conv_geom(NodeId(idx), x, &w, *stride, *padding)?;
                    let mut dw = self.params[weight.0].requires_grad.then(|| Tensor::<T>::zeros(w.shape()));
                    let dx = kernels::conv2d_backward(
                        dy.data(),
                        x.data(),
                        x.shape()[0],
                        w.data(),
                        &g,
                        dw.as_mut().map(|t| t.data_mut()),
                        wants(0),
                    );
                    if let Some(dw) = dw {
                        self.params[weight.0].grad.add_assign(&dw);
                    }
                    input_grads[0] = dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let x = value(0);
                    let layout = self.bn_layout(NodeId(idx), x)?;
                    let Aux::BatchNorm { xhat, inv_std, training } = &cache.aux[idx] else {
                        unreachable!("batch norm caches its normalization")
                    };
                    let gamma_v = self.params[gamma.0].value.clone();
                    let mut dg = self.params[gamma.0].requires_grad.then(|| Tensor::<T>::zeros(gamma_v.shape()));
                    let mut db = self.params[beta.0].requires_grad.then(|| Tensor::<T>::zeros(gamma_v.shape()));
                    let dx = kernels::batchnorm_backward(
                        dy.data(),
                        xhat,
                        inv_std,
                        gamma_v.data(),
                        &layout,
                        *training,
                        dg.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        wants(0),
                    );
                    if let Some(dg) = dg {
                        self.params[gamma.0].grad.add_assign(&dg);
                    }
                    if let Some(db) = db {
                        self.params[beta.0].grad.add_assign(&db);
                    }
                    input_grads[0] = dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
                }
                Op::Relu => {
                    let x = value(0);
                    let dx = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    input_grads[0] = Some(Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::MaxPool2d { .. } => {
                    let x = value(0);
                    let Aux::Pool(argmax) = &cache.aux[idx] else { unreachable!("pool caches argmax") };
                    let mut dx = Tensor::zeros(x.shape());
                    let buf = dx.data_mut();
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        buf[src] = buf[src] + g;
                    }
                    input_grads[0] = Some(dx);
                }
                Op::GlobalAvgPool => {
                    let x = value(0);
                    let plane = x.shape()[2] * x.shape()[3];
                    let inv = T::of(1.0 / plane as f64);
                    let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();
                    input_grads[0] = Some(Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::Flatten | Op::Reshape(_) => {
                    input_grads[0] = Some(dy.clone().reshape(value(0).shape())?);
                }
                Op::L2Normalize => {
                    let x = value(0);
                    let y = cache.values[idx].as_ref().expect("cached output");
                    let Aux::Norms(norms) = &cache.aux[idx] else { unreachable!("normalize caches norms") };
                    let d = x.shape()[1];
                    let mut dx = Vec::with_capacity(x.len());
                    for ((yr, gr), &norm) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)).zip(norms) {
                        let proj = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * proj) / norm));
                    }
                    input_grads[0] = Some(Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::RowDot => {
                    let (a, b) = (value(0), value(1));
                    let d = a.shape()[1];
                    let scaled = |other: &Tensor<T>| -> Result<Tensor<T>> {
                        let v = other
                            .data()
                            .chunks_exact(d)
                            .zip(dy.data())
                            .flat_map(|(row, &g)| row.iter().map(move |&o| o * g))
                            .collect();
                        Tensor::new(other.shape().to_vec(), v)
                    };
                    if wants(0) {
                        input_grads[0] = Some(scaled(b)?);
                    }
                    if wants(1) {
                        input_grads[1] = Some(scaled(a)?);
                    }
                }
                Op::Mean => {
                    let x = value(0);
                    let g = dy.data()[0] / T::of(x.len() as f64);
                    input_grads[0] = Some(Tensor::full(x.shape(), g));
                }
                Op::Add => {
                    input_grads[0] = wants(0).then(|| dy.clone());
                    input_grads[1] = wants(1).then(|| dy.clone());
                }
                Op::Scale(f) => {
                    let f = T::of(*f);
                    input_grads[0] = Some(dy.map(|g| g * f));
                }
                Op::MseLoss => {
                    let (a, b) = (value(0), value(1));
                    let c = dy.data()[0] * T::of(2.0 / a.len() as f64);
                    let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&u, &v)| (u - v) * c).collect();
                    if wants(1) {
                        input_grads[1] = Some(Tensor::new(b.shape().to_vec(), diff.iter().map(|&v| -v).collect())?);
                    }
                    if wants(0) {
                        input_grads[0] = Some(Tensor::new(a.shape().to_vec(), diff)?);
                    }
                }
                Op::SoftmaxCrossEntropy => {
                    let logits = value(0);
                    let Aux::Probs { probs, labels } = &cache.aux[idx] else { unreachable!("cross entropy caches probs") };
                    let classes = logits.shape()[1];
                    let c = dy.data()[0] / T::of(labels.len() as f64);
                    let mut g: Vec<T> = probs.iter().map(|&p| p * c).collect();
                    for (b, &l) in labels.iter().enumerate() {
                        g[b * classes + l] = g[b * classes + l] - c;
                    }
                    input_grads[0] = Some(Tensor::new(logits.shape().to_vec(), g)?);
                }
            }
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !trainable[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
