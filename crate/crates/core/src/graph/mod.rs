//! Explicit layer DAGs, their execution, and the hook API compression
//! algorithms use to rewrite them.

mod exec;
mod hooks;
mod serialize;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binarization::WeightScheme;
use crate::error::{shape_err, Error, Result};
use crate::quantization::QuantizerSpec;
use crate::tensor::Tensor;

pub use exec::{run_graph, ForwardContext, Mode};
pub use hooks::{ExportAction, Family, Hook, HookPoint, HookPosition, HookTransform};
pub use serialize::{deserialize_model, load_model, save_model, serialize_model, SerializedModel, FORMAT_VERSION};

/// Reserved id of the graph input.
pub const INPUT: &str = "input";

/// A trainable or buffer tensor shared between the graph, hooks and
/// controllers.
#[derive(Clone, Debug)]
pub struct Param(Arc<RwLock<Tensor>>);

impl Param {
    pub fn new(t: Tensor) -> Self {
        Param(Arc::new(RwLock::new(t)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Tensor> {
        self.0.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Tensor> {
        self.0.write()
    }

    pub fn snapshot(&self) -> Tensor {
        let mut t = self.0.read().clone();
        t.grad = None;
        t
    }

    /// Identity of the underlying storage.
    pub fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    pub fn same(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Parameter of a specific node, e.g. `conv1.weight`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamTarget {
    pub node: String,
    pub param: String,
}

impl std::fmt::Display for ParamTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.node, self.param)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Add,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Fixed quantize-dequantize. With a `target` it rewrites that parameter
    /// whenever it is read; otherwise it acts on its single input.
    FakeQuantize {
        spec: QuantizerSpec,
        zero_points: Vec<i64>,
        target: Option<ParamTarget>,
    },
    BinarizeWeights {
        scheme: WeightScheme,
        target: ParamTarget,
    },
    /// Scale-threshold activation binarization with params `scale`, `threshold`.
    BinarizeActivations,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::MaxPool2d { .. } => "max_pool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::FakeQuantize { .. } => "fake_quantize",
            LayerKind::BinarizeWeights { .. } => "binarize_weights",
            LayerKind::BinarizeActivations => "binarize_activations",
        }
    }

    /// Parameter-rewriting nodes do not take part in dataflow.
    pub fn param_target(&self) -> Option<&ParamTarget> {
        match self {
            LayerKind::FakeQuantize { target, .. } => target.as_ref(),
            LayerKind::BinarizeWeights { target, .. } => Some(target),
            _ => None,
        }
    }

    fn expected_params(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                bias,
                ..
            } => {
                let mut v = vec![("weight", vec![out_channels, in_channels, kernel_h, kernel_w])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            LayerKind::BatchNorm { channels, .. } => vec![
                ("gamma", vec![channels]),
                ("beta", vec![channels]),
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
            ],
            _ => vec![],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub params: BTreeMap<String, Param>,
    /// Per-sample output shape (batch dimension excluded).
    pub(crate) out_shape: Vec<usize>,
}

impl Node {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } | LayerKind::BatchNorm { .. }
        )
    }
}

/// A directed acyclic graph of layers. Nodes are kept in insertion order and
/// may only consume earlier nodes, so that order is always topological.
#[derive(Debug)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    output: Option<String>,
    hooks: Vec<Hook>,
}

impl ModelGraph {
    /// `input_shape` is the per-sample shape, e.g. `[1, 8, 8]` or `[2]`.
    pub fn new(input_shape: Vec<usize>) -> Self {
        ModelGraph {
            input_shape,
            nodes: Vec::new(),
            output: None,
            hooks: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Id of the output node (the last node unless set explicitly).
    pub fn output(&self) -> &str {
        self.output
            .as_deref()
            .or_else(|| self.nodes.last().map(|n| n.id.as_str()))
            .unwrap_or(INPUT)
    }

    pub fn set_output(&mut self, id: &str) -> Result<()> {
        self.node(id)?;
        self.output = Some(id.to_string());
        Ok(())
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shape_of(self.output()).expect("output exists")
    }

    pub fn shape_of(&self, id: &str) -> Result<Vec<usize>> {
        if id == INPUT {
            return Ok(self.input_shape.clone());
        }
        Ok(self.node(id)?.out_shape.clone())
    }

    /// Ids of the nodes consuming `id` in dataflow.
    pub fn consumers(&self, id: &str) -> Vec<&Node> {
        self.nodes
            .iter()
            .filter(|n| n.kind.param_target().is_none() && n.inputs.iter().any(|i| i == id))
            .collect()
    }

    /// Appends a node after validating ids, inputs and parameter shapes.
    pub fn add_node(
        &mut self,
        id: &str,
        kind: LayerKind,
        inputs: &[&str],
        params: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let params = params.into_iter().map(|(k, v)| (k, Param::new(v))).collect();
        self.push_node(Node {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params,
            out_shape: vec![],
        })
    }

    pub(crate) fn push_node(&mut self, mut node: Node) -> Result<()> {
        if node.id == INPUT || self.node_index(&node.id).is_some() {
            return Err(Error::Graph(format!("duplicate node id `{}`", node.id)));
        }
        node.out_shape = self.infer_node(&node)?;
        self.nodes.push(node);
        Ok(())
    }

    fn infer_node(&self, node: &Node) -> Result<Vec<usize>> {
        let mut in_shapes = Vec::with_capacity(node.inputs.len());
        for i in &node.inputs {
            if i != INPUT && self.node_index(i).is_none() {
                return Err(Error::Graph(format!("node `{}` consumes unknown node `{i}`", node.id)));
            }
            in_shapes.push(self.shape_of(i)?);
        }
        for (name, shape) in node.kind.expected_params() {
            let p = node
                .params
                .get(name)
                .ok_or_else(|| Error::Graph(format!("node `{}` is missing parameter `{name}`", node.id)))?;
            if p.read().shape() != shape.as_slice() {
                return Err(shape_err(
                    "add_node",
                    format!(
                        "`{}.{name}` has shape {:?}, expected {shape:?}",
                        node.id,
                        p.read().shape()
                    ),
                ));
            }
        }
        let arity = |n: usize| -> Result<()> {
            if in_shapes.len() != n {
                return Err(Error::Graph(format!(
                    "`{}` ({}) takes {n} input(s), got {}",
                    node.id,
                    node.kind.name(),
                    in_shapes.len()
                )));
            }
            Ok(())
        };
        let op = node.kind.name();
        match &node.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                arity(1)?;
                let s = &in_shapes[0];
                if s.len() != 3 || s[0] != *in_channels {
                    return Err(shape_err(
                        op,
                        format!("`{}` expects [{in_channels}, H, W], got {s:?}", node.id),
                    ));
                }
                if *stride == 0 || s[1] + 2 * padding < *kernel_h || s[2] + 2 * padding < *kernel_w {
                    return Err(shape_err(op, format!("`{}` kernel does not fit {s:?}", node.id)));
                }
                Ok(vec![
                    *out_channels,
                    (s[1] + 2 * padding - kernel_h) / stride + 1,
                    (s[2] + 2 * padding - kernel_w) / stride + 1,
                ])
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                arity(1)?;
                if in_shapes[0] != [*in_features] {
                    return Err(shape_err(
                        op,
                        format!("`{}` expects [{in_features}], got {:?}", node.id, in_shapes[0]),
                    ));
                }
                Ok(vec![*out_features])
            }
            LayerKind::BatchNorm { channels, .. } => {
                arity(1)?;
                let s = &in_shapes[0];
                if !(s.len() == 1 || s.len() == 3) || s[0] != *channels {
                    return Err(shape_err(
                        op,
                        format!("`{}` expects {channels} channels, got {s:?}", node.id),
                    ));
                }
                Ok(s.clone())
            }
            LayerKind::Relu | LayerKind::BinarizeActivations => {
                arity(1)?;
                if matches!(node.kind, LayerKind::BinarizeActivations) {
                    let c = in_shapes[0][0];
                    for p in ["scale", "threshold"] {
                        let ok = node.params.get(p).map(|t| t.read().shape().to_vec());
                        let want = if p == "scale" { vec![1] } else { vec![c] };
                        if ok.as_ref() != Some(&want) {
                            return Err(shape_err(op, format!("`{}.{p}` must have shape {want:?}", node.id)));
                        }
                    }
                }
                Ok(in_shapes[0].clone())
            }
            LayerKind::Add => {
                arity(2)?;
                if in_shapes[0] != in_shapes[1] {
                    return Err(shape_err(
                        op,
                        format!("`{}` inputs {:?} and {:?} differ", node.id, in_shapes[0], in_shapes[1]),
                    ));
                }
                Ok(in_shapes[0].clone())
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                arity(1)?;
                let s = &in_shapes[0];
                if s.len() != 3 || *kernel == 0 || *stride == 0 || s[1] < *kernel || s[2] < *kernel {
                    return Err(shape_err(op, format!("`{}` window {kernel} on {s:?}", node.id)));
                }
                Ok(vec![s[0], (s[1] - kernel) / stride + 1, (s[2] - kernel) / stride + 1])
            }
            LayerKind::Flatten => {
                arity(1)?;
                Ok(vec![in_shapes[0].iter().product()])
            }
            LayerKind::FakeQuantize { target: None, .. } => {
                arity(1)?;
                Ok(in_shapes[0].clone())
            }
            LayerKind::FakeQuantize { target: Some(t), .. } | LayerKind::BinarizeWeights { target: t, .. } => {
                arity(0)?;
                let host = self.node(&t.node)?;
                if !host.params.contains_key(&t.param) {
                    return Err(Error::Graph(format!("`{}` targets missing parameter {t}", node.id)));
                }
                Ok(host.params[&t.param].read().shape().to_vec())
            }
        }
    }

    /// Mutable access to a node's parameter map for algorithms that replace
    /// tensors wholesale; shapes are re-validated.
    pub fn replace_param(&mut self, node: &str, name: &str, t: Tensor) -> Result<()> {
        let idx = self
            .node_index(node)
            .ok_or_else(|| Error::UnknownNode(node.to_string()))?;
        let p = self.nodes[idx]
            .params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("`{node}` has no parameter `{name}`")))?;
        if p.read().shape() != t.shape() {
            return Err(shape_err(
                "replace_param",
                format!("{node}.{name}: {:?} vs {:?}", p.read().shape(), t.shape()),
            ));
        }
        *p.write() = t;
        Ok(())
    }

    pub fn hooks(&self) -> &[Hook] {
        &self.hooks
    }

    /// Registers a hook. The graph's external signature is unchanged.
    pub fn insert_hook(&mut self, point: HookPoint, transform: Arc<dyn HookTransform>) -> Result<()> {
        if point.node == INPUT {
            if point.position != HookPosition::PostOutput {
                return Err(Error::Graph(
                    "only POST_OUTPUT hooks may attach to the graph input".into(),
                ));
            }
        } else {
            let node = self.node(&point.node)?;
            match &point.position {
                HookPosition::PreParam(name) if !node.params.contains_key(name) => {
                    return Err(Error::Graph(format!(
                        "PRE_PARAM hook needs parameter `{name}` on `{}`",
                        node.id
                    )));
                }
                HookPosition::PreInput(i) if *i >= node.inputs.len() => {
                    return Err(Error::Graph(format!("`{}` has no input #{i}", node.id)));
                }
                _ => {}
            }
        }
        let family = transform.family();
        if self
            .hooks
            .iter()
            .any(|h| h.point == point && h.transform.family() == family)
        {
            return Err(Error::DuplicateHook {
                family: family.to_string(),
                point: point.to_string(),
            });
        }
        self.hooks.push(Hook { point, transform });
        Ok(())
    }

    pub fn remove_hooks(&mut self, family: &Family) -> usize {
        let before = self.hooks.len();
        self.hooks.retain(|h| &h.transform.family() != family);
        before - self.hooks.len()
    }

    pub(crate) fn hooks_at<'a>(
        &'a self,
        node: &'a str,
        position: &'a HookPosition,
    ) -> impl Iterator<Item = &'a Hook> + 'a {
        self.hooks
            .iter()
            .filter(move |h| h.point.node == node && &h.point.position == position)
    }

    /// Every parameter in graph order, including buffers.
    pub fn params(&self) -> Vec<(ParamTarget, Param)> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.params.iter().map(move |(k, p)| {
                    (
                        ParamTarget {
                            node: n.id.clone(),
                            param: k.clone(),
                        },
                        p.clone(),
                    )
                })
            })
            .collect()
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.read().requires_grad)
            .map(|(_, p)| p)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.read().requires_grad)
            .map(|(_, p)| p.read().len())
            .sum()
    }

    /// Deep copy of the nodes with fresh parameter storage; hooks are not
    /// copied because they share state with their controllers.
    pub fn detached_copy(&self) -> ModelGraph {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    params: n
                        .params
                        .iter()
                        .map(|(k, p)| (k.clone(), Param::new(p.read().clone())))
                        .collect(),
                    ..n.clone()
                })
                .collect(),
            output: self.output.clone(),
            hooks: Vec::new(),
        }
    }

    /// Multiply-accumulate count of one sample through a Conv2d or
    /// FullyConnected node.
    pub fn layer_flops(&self, id: &str) -> Result<usize> {
        let node = self.node(id)?;
        Ok(match node.kind {
            LayerKind::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => node.out_shape.iter().product::<usize>() * in_channels * kernel_h * kernel_w,
            LayerKind::FullyConnected {
                in_features,
                out_features,
                ..
            } => in_features * out_features,
            _ => 0,
        })
    }

    /// Ids of Conv2d and FullyConnected nodes in topological order.
    pub fn weighted_layers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. }))
            .map(|n| n.id.clone())
            .collect()
    }

    /// Rebuilds shape caches and re-validates every node (after in-place
    /// surgery such as filter stripping).
    pub(crate) fn revalidate(&mut self) -> Result<()> {
        let nodes = std::mem::take(&mut self.nodes);
        for n in nodes {
            self.push_node(n)?;
        }
        Ok(())
    }

    /// Inserts a node directly after `after` (or at the front for the input)
    /// and rewires `consumers` of `source` to read from it.
    pub(crate) fn splice_after(
        &mut self,
        after: &str,
        node: Node,
        source: &str,
        consumers: Option<&HashSet<String>>,
    ) -> Result<()> {
        let pos = if after == INPUT {
            0
        } else {
            self.node_index(after)
                .ok_or_else(|| Error::UnknownNode(after.to_string()))?
                + 1
        };
        let new_id = node.id.clone();
        for n in self.nodes.iter_mut() {
            if consumers.is_none_or(|c| c.contains(&n.id)) && n.kind.param_target().is_none() {
                for i in n.inputs.iter_mut() {
                    if i == source {
                        *i = new_id.clone();
                    }
                }
            }
        }
        if self.output() == source && consumers.is_none() {
            self.output = Some(new_id.clone());
        }
        self.nodes.insert(pos, node);
        self.revalidate()
    }

    /// Inserts a parameter-rewriting node right after its host.
    pub(crate) fn push_param_node(&mut self, node: Node) -> Result<()> {
        let host = node
            .kind
            .param_target()
            .map(|t| t.node.clone())
            .ok_or_else(|| Error::Graph("not a parameter node".into()))?;
        let mut pos = self.node_index(&host).ok_or_else(|| Error::UnknownNode(host.clone()))? + 1;
        while pos < self.nodes.len()
            && self.nodes[pos]
                .kind
                .param_target()
                .map(|t| t.node == host)
                .unwrap_or(false)
        {
            pos += 1;
        }
        let out = self.output().to_string();
        self.output = Some(out);
        self.nodes.insert(pos, node);
        self.revalidate()
    }
}

pub(crate) fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)).with_requires_grad(true)
}

/// Convenience constructors for the standard layers.
impl ModelGraph {
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        id: &str,
        input: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let in_channels = *self.shape_of(input)?.first().unwrap_or(&0);
        let fan_in = in_channels * kernel * kernel;
        let mut params = BTreeMap::new();
        params.insert(
            "weight".to_string(),
            kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        if bias {
            params.insert(
                "bias".to_string(),
                Tensor::zeros(&[out_channels]).with_requires_grad(true),
            );
        }
        self.add_node(
            id,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
                bias,
            },
            &[input],
            params,
        )
    }

    pub fn fully_connected(&mut self, id: &str, input: &str, out_features: usize, rng: &mut impl Rng) -> Result<()> {
        let in_features = *self.shape_of(input)?.first().unwrap_or(&0);
        let mut params = BTreeMap::new();
        params.insert(
            "weight".to_string(),
            kaiming_uniform(&[out_features, in_features], in_features, rng),
        );
        params.insert(
            "bias".to_string(),
            Tensor::zeros(&[out_features]).with_requires_grad(true),
        );
        self.add_node(
            id,
            LayerKind::FullyConnected {
                in_features,
                out_features,
                bias: true,
            },
            &[input],
            params,
        )
    }

    pub fn batch_norm(&mut self, id: &str, input: &str) -> Result<()> {
        let channels = *self.shape_of(input)?.first().unwrap_or(&0);
        let mut params = BTreeMap::new();
        params.insert("gamma".to_string(), Tensor::ones(&[channels]).with_requires_grad(true));
        params.insert("beta".to_string(), Tensor::zeros(&[channels]).with_requires_grad(true));
        params.insert("running_mean".to_string(), Tensor::zeros(&[channels]));
        params.insert("running_var".to_string(), Tensor::ones(&[channels]));
        self.add_node(
            id,
            LayerKind::BatchNorm {
                channels,
                eps: 1e-5,
                momentum: 0.1,
            },
            &[input],
            params,
        )
    }

    pub fn relu(&mut self, id: &str, input: &str) -> Result<()> {
        self.add_node(id, LayerKind::Relu, &[input], BTreeMap::new())
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> Result<()> {
        self.add_node(id, LayerKind::Add, &[a, b], BTreeMap::new())
    }

    pub fn max_pool2d(&mut self, id: &str, input: &str, kernel: usize, stride: usize) -> Result<()> {
        self.add_node(id, LayerKind::MaxPool2d { kernel, stride }, &[input], BTreeMap::new())
    }

    pub fn flatten(&mut self, id: &str, input: &str) -> Result<()> {
        self.add_node(id, LayerKind::Flatten, &[input], BTreeMap::new())
    }
}

/// Whether the next weighted layers downstream of `id` include a fully
/// connected layer.
pub(crate) fn feeds_fc(graph: &ModelGraph, id: &str) -> bool {
    let mut stack = vec![id.to_string()];
    let mut seen = HashSet::new();
    while let Some(cur) = stack.pop() {
        for n in graph.consumers(&cur) {
            if !seen.insert(n.id.clone()) {
                continue;
            }
            match n.kind {
                LayerKind::FullyConnected { .. } => return true,
                LayerKind::Conv2d { .. } => {}
                _ => stack.push(n.id.clone()),
            }
        }
    }
    false
}

/// Full-match regexes over node ids.
pub(crate) fn compile_patterns(patterns: &[String]) -> Result<Vec<regex::Regex>> {
    patterns
        .iter()
        .map(|p| {
            regex::Regex::new(&format!("^(?:{p})$"))
                .map_err(|e| Error::InvalidArgument(format!("bad layer pattern `{p}`: {e}")))
        })
        .collect()
}
