use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::{HookPoint, HookPosition, LayerKind, ModelGraph, Node, Param, INPUT};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, stochastic gates.
    Train,
    /// Running statistics, deterministic masks.
    Eval,
    /// Like `Eval`, but quantizers observe their inputs instead of rounding.
    Calibrate,
}

/// One forward pass: the tape, the parameters bound onto it, and the
/// session generator for stochastic hooks.
pub struct ForwardContext<'r> {
    pub tape: Tape,
    mode: Mode,
    track_grads: bool,
    bound: HashMap<usize, Var>,
    bindings: Vec<(Var, Param)>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardContext<'r> {
    /// Gradients are tracked in train mode only.
    pub fn new(mode: Mode) -> Self {
        ForwardContext {
            tape: Tape::new(),
            mode,
            track_grads: mode == Mode::Train,
            bound: HashMap::new(),
            bindings: Vec::new(),
            rng: None,
        }
    }

    pub fn with_rng(mut self, rng: &'r mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn with_grads(mut self, track: bool) -> Self {
        self.track_grads = track;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::InvalidArgument("this forward pass needs a random generator".into()))
    }

    /// Records `p` on the tape once per pass; repeated reads share the leaf.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.key()) {
            return v;
        }
        let t = p.read();
        let mut value = t.clone();
        value.requires_grad = self.track_grads && t.requires_grad;
        drop(t);
        let v = self.tape.leaf(value);
        self.bound.insert(p.key(), v);
        self.bindings.push((v, p.clone()));
        v
    }

    /// Binds `p` as a differentiable leaf regardless of the pass settings.
    /// Must precede any other read of `p` in this pass.
    pub fn param_with_grad(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.key()) {
            return v;
        }
        let v = self.tape.leaf(p.snapshot().with_requires_grad(true));
        self.bound.insert(p.key(), v);
        self.bindings.push((v, p.clone()));
        v
    }

    pub fn bound_var(&self, p: &Param) -> Option<Var> {
        self.bound.get(&p.key()).copied()
    }

    /// Backpropagates `loss` and accumulates into every bound trainable
    /// parameter's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.tape.backward(loss)?;
        for (v, p) in &self.bindings {
            if self.tape.requires_grad(*v) {
                if let Some(g) = grads.get(*v) {
                    p.write().accumulate_grad(g.data())?;
                }
            }
        }
        Ok(grads)
    }
}

type ParamNodes<'g> = HashMap<(&'g str, &'g str), Vec<&'g Node>>;

impl ModelGraph {
    /// Runs the graph on `input` (batch-first) with every hook applied.
    pub fn forward(&self, ctx: &mut ForwardContext<'_>, input: Var) -> Result<Var> {
        let shape = ctx.tape.shape(input).to_vec();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(shape_err(
                "run_graph",
                format!("input {shape:?} does not match [N, {:?}]", self.input_shape),
            ));
        }
        let mut param_nodes: ParamNodes<'_> = HashMap::new();
        for n in &self.nodes {
            if let Some(t) = n.kind.param_target() {
                param_nodes
                    .entry((t.node.as_str(), t.param.as_str()))
                    .or_default()
                    .push(n);
            }
        }

        let mut values: HashMap<&str, Var> = HashMap::new();
        let x = self.apply_hooks(ctx, INPUT, &HookPosition::PostOutput, input)?;
        values.insert(INPUT, x);
        for node in &self.nodes {
            if node.kind.param_target().is_some() {
                continue;
            }
            let mut ins = Vec::with_capacity(node.inputs.len());
            for (i, id) in node.inputs.iter().enumerate() {
                let v = *values.get(id.as_str()).ok_or_else(|| Error::UnknownNode(id.clone()))?;
                ins.push(self.apply_hooks(ctx, &node.id, &HookPosition::PreInput(i), v)?);
            }
            let y = self.eval_node(ctx, node, &ins, &param_nodes)?;
            let y = self.apply_hooks(ctx, &node.id, &HookPosition::PostOutput, y)?;
            values.insert(&node.id, y);
        }
        values
            .get(self.output())
            .copied()
            .ok_or_else(|| Error::UnknownNode(self.output().to_string()))
    }

    fn apply_hooks(
        &self,
        ctx: &mut ForwardContext<'_>,
        node: &str,
        position: &HookPosition,
        mut x: Var,
    ) -> Result<Var> {
        for hook in self.hooks_at(node, position) {
            x = hook.transform.apply(ctx, &hook.point, x)?;
        }
        Ok(x)
    }

    fn read_param(
        &self,
        ctx: &mut ForwardContext<'_>,
        node: &Node,
        name: &str,
        param_nodes: &ParamNodes<'_>,
    ) -> Result<Var> {
        let p = node
            .params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("`{}` has no parameter `{name}`", node.id)))?;
        let mut v = ctx.param(p);
        if let Some(list) = param_nodes.get(&(node.id.as_str(), name)) {
            for pn in list {
                v = apply_transform_node(ctx, pn, v)?;
            }
        }
        self.apply_hooks(ctx, &node.id, &HookPosition::PreParam(name.to_string()), v)
    }

    fn eval_node(&self, ctx: &mut ForwardContext<'_>, node: &Node, ins: &[Var], pn: &ParamNodes<'_>) -> Result<Var> {
        match &node.kind {
            LayerKind::Conv2d {
                stride,
                padding,
                bias,
                out_channels,
                ..
            } => {
                let w = self.read_param(ctx, node, "weight", pn)?;
                let y = ctx.tape.conv2d(ins[0], w, *stride, *padding)?;
                if *bias {
                    let b = self.read_param(ctx, node, "bias", pn)?;
                    let b = ctx.tape.reshape(b, &[1, *out_channels, 1, 1])?;
                    ctx.tape.add_broadcast(y, b)
                } else {
                    Ok(y)
                }
            }
            LayerKind::FullyConnected { bias, out_features, .. } => {
                let w = self.read_param(ctx, node, "weight", pn)?;
                let wt = ctx.tape.transpose(w)?;
                let y = ctx.tape.matmul(ins[0], wt)?;
                if *bias {
                    let b = self.read_param(ctx, node, "bias", pn)?;
                    let b = ctx.tape.reshape(b, &[1, *out_features])?;
                    ctx.tape.add_broadcast(y, b)
                } else {
                    Ok(y)
                }
            }
            LayerKind::BatchNorm {
                channels,
                eps,
                momentum,
            } => self.run_batch_norm(ctx, node, ins[0], *channels, *eps, *momentum, pn),
            LayerKind::Relu => Ok(ctx.tape.relu(ins[0])),
            LayerKind::Add => ctx.tape.add(ins[0], ins[1]),
            LayerKind::MaxPool2d { kernel, stride } => ctx.tape.max_pool2d(ins[0], *kernel, *stride),
            LayerKind::Flatten => {
                let s = ctx.tape.shape(ins[0]).to_vec();
                let rest: usize = s[1..].iter().product();
                ctx.tape.reshape(ins[0], &[s[0], rest])
            }
            LayerKind::FakeQuantize { .. } | LayerKind::BinarizeActivations => apply_transform_node(ctx, node, ins[0]),
            LayerKind::BinarizeWeights { .. } => Err(Error::Graph(format!(
                "`{}` rewrites a parameter and has no dataflow input",
                node.id
            ))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_batch_norm(
        &self,
        ctx: &mut ForwardContext<'_>,
        node: &Node,
        x: Var,
        channels: usize,
        eps: f64,
        momentum: f64,
        pn: &ParamNodes<'_>,
    ) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let mut stat_shape = vec![1; shape.len()];
        stat_shape[1] = channels;
        let gamma = self.read_param(ctx, node, "gamma", pn)?;
        let beta = self.read_param(ctx, node, "beta", pn)?;
        let gamma = ctx.tape.reshape(gamma, &stat_shape)?;
        let beta = ctx.tape.reshape(beta, &stat_shape)?;

        let normalized = if ctx.mode() == Mode::Train {
            let count = (ctx.tape.value(x).len() / channels) as f64;
            let s = ctx.tape.sum_to(x, &stat_shape)?;
            let mean = ctx.tape.scale(s, 1.0 / count);
            let centered = {
                let neg = ctx.tape.neg(mean);
                ctx.tape.add_broadcast(x, neg)?
            };
            let sq = ctx.tape.square(centered);
            let vs = ctx.tape.sum_to(sq, &stat_shape)?;
            let var = ctx.tape.scale(vs, 1.0 / count);
            {
                let batch_mean = ctx.tape.value(mean).data().to_vec();
                let batch_var = ctx.tape.value(var).data().to_vec();
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mut rm = node.params["running_mean"].write();
                for (r, m) in rm.data_mut().iter_mut().zip(&batch_mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
                drop(rm);
                let mut rv = node.params["running_var"].write();
                for (r, v) in rv.data_mut().iter_mut().zip(&batch_var) {
                    *r = (1.0 - momentum) * *r + momentum * v * unbias;
                }
            }
            let std = {
                let ve = ctx.tape.add_scalar(var, eps);
                ctx.tape.sqrt(ve)
            };
            let std = ctx.tape.broadcast_to(std, &shape)?;
            ctx.tape.div(centered, std)?
        } else {
            let rm = node.params["running_mean"].read().clone();
            let rv = node.params["running_var"].read().clone();
            let inv: Vec<f64> = rv.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let shift: Vec<f64> = rm.data().iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let inv = ctx.tape.constant(Tensor::new(stat_shape.clone(), inv)?);
            let shift = ctx.tape.constant(Tensor::new(stat_shape.clone(), shift)?);
            let y = ctx.tape.mul_broadcast(x, inv)?;
            ctx.tape.add_broadcast(y, shift)?
        };
        let y = ctx.tape.mul_broadcast(normalized, gamma)?;
        ctx.tape.add_broadcast(y, beta)
    }
}

/// Forward of the explicit transform nodes produced by export.
fn apply_transform_node(ctx: &mut ForwardContext<'_>, node: &Node, x: Var) -> Result<Var> {
    match &node.kind {
        LayerKind::FakeQuantize { spec, zero_points, .. } => {
            crate::quantization::exported_fake_quant(ctx, x, spec, zero_points, &node.params)
        }
        LayerKind::BinarizeWeights { scheme, .. } => crate::binarization::binarize_weights_var(ctx, x, *scheme),
        LayerKind::BinarizeActivations => {
            let s = ctx.param(&node.params["scale"]);
            let t = ctx.param(&node.params["threshold"]);
            crate::binarization::binarize_activations_var(ctx, x, s, t)
        }
        other => Err(Error::Graph(format!(
            "`{}` ({}) is not a transform node",
            node.id,
            other.name()
        ))),
    }
}

/// Convenience: run without gradients and return the output tensor.
pub fn run_graph(graph: &ModelGraph, input: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut ctx = ForwardContext::new(mode).with_grads(false);
    if mode == Mode::Train {
        // Stochastic hooks need a generator; a fixed one keeps this helper
        // deterministic.
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut ctx = ForwardContext::new(mode).with_grads(false).with_rng(&mut rng);
        let x = ctx.tape.constant(input.clone());
        let y = graph.forward(&mut ctx, x)?;
        return Ok(ctx.tape.value(y).clone());
    }
    let x = ctx.tape.constant(input.clone());
    let y = graph.forward(&mut ctx, x)?;
    Ok(ctx.tape.value(y).clone())
}

impl HookPoint {
    pub(crate) fn param_name(&self) -> Option<&str> {
        match &self.position {
            HookPosition::PreParam(p) => Some(p),
            _ => None,
        }
    }
}
