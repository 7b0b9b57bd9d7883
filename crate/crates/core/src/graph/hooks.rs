use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{ForwardContext, LayerKind, INPUT};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum HookPosition {
    /// Wraps a named parameter before the node consumes it.
    PreParam(String),
    /// Wraps the node's `i`-th input as seen by this node only.
    PreInput(usize),
    /// Wraps the node's output as seen by all consumers.
    PostOutput,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HookPoint {
    pub node: String,
    pub position: HookPosition,
}

impl HookPoint {
    pub fn pre_param(node: &str, param: &str) -> Self {
        HookPoint {
            node: node.to_string(),
            position: HookPosition::PreParam(param.to_string()),
        }
    }

    pub fn pre_input(node: &str, index: usize) -> Self {
        HookPoint {
            node: node.to_string(),
            position: HookPosition::PreInput(index),
        }
    }

    pub fn post_output(node: &str) -> Self {
        HookPoint {
            node: node.to_string(),
            position: HookPosition::PostOutput,
        }
    }

    pub fn is_graph_input(&self) -> bool {
        self.node == INPUT
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.position {
            HookPosition::PreParam(p) => write!(f, "{}.{p} (pre-param)", self.node),
            HookPosition::PreInput(i) => write!(f, "{}[input {i}] (pre-input)", self.node),
            HookPosition::PostOutput => write!(f, "{} (post-output)", self.node),
        }
    }
}

/// Compression family a hook belongs to; at most one hook per family may sit
/// at any point.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Quantization,
    Binarization,
    Sparsity,
    Pruning,
    Custom(String),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Quantization => f.write_str("quantization"),
            Family::Binarization => f.write_str("binarization"),
            Family::Sparsity => f.write_str("sparsity"),
            Family::Pruning => f.write_str("pruning"),
            Family::Custom(name) => f.write_str(name),
        }
    }
}

/// How a hook materializes in an exported model.
#[derive(Clone, Debug)]
pub enum ExportAction {
    /// Multiply the hooked parameter by this mask in place.
    BakeMask(Tensor),
    /// Insert an explicit node carrying these parameters. For pre-param
    /// hooks the kind must carry a parameter target.
    Node {
        kind: LayerKind,
        params: BTreeMap<String, Tensor>,
    },
    /// Identity at inference time.
    Skip,
}

pub trait HookTransform: Send + Sync + fmt::Debug {
    fn family(&self) -> Family;

    fn apply(&self, ctx: &mut ForwardContext<'_>, point: &HookPoint, x: Var) -> Result<Var>;

    fn export(&self, point: &HookPoint) -> Result<ExportAction> {
        Err(Error::Graph(format!(
            "{} hook at {point} has no export form",
            self.family()
        )))
    }
}

#[derive(Clone, Debug)]
pub struct Hook {
    pub point: HookPoint,
    pub transform: Arc<dyn HookTransform>,
}
