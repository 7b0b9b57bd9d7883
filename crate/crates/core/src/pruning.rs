//! Structured pruning of convolution output filters: importance criteria,
//! rate schedules, zero-out masks during training, channel-mask propagation
//! and physical filter removal.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{compile_patterns, feeds_fc, Family, HookPoint, LayerKind, ModelGraph, Node, Param, INPUT};
use crate::parallel::map_indices;
use crate::sparsity::MaskHook;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    L1,
    L2,
    #[default]
    GeometricMedian,
}

/// Per-filter scores of a `[O, ...]` weight; lower means pruned first.
/// The geometric-median score of filter `i` is `Σ_{j≠i} ‖F_i − F_j‖₂`.
pub fn filter_importance(w: &Tensor, criterion: Criterion) -> Result<Vec<f64>> {
    if w.ndim() < 2 {
        return Err(shape_err(
            "filter_importance",
            format!("need a [O, ...] weight, got {:?}", w.shape()),
        ));
    }
    let n = w.shape()[0];
    let d = w.len() / n;
    let filters: Vec<&[f64]> = w.data().chunks(d).collect();
    Ok(match criterion {
        Criterion::L1 => filters.iter().map(|f| f.iter().map(|v| v.abs()).sum()).collect(),
        Criterion::L2 => filters
            .iter()
            .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        Criterion::GeometricMedian => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "geometric-median importance needs at least two filters".into(),
                ));
            }
            (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            filters[i]
                                .iter()
                                .zip(filters[j])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .sum()
                })
                .collect()
        }
    })
}

/// Number of filters pruned out of `n` at `rate`.
pub fn pruned_count(n: usize, rate: f64) -> usize {
    // The epsilon keeps products such as 0.29 * 100 from flooring one low.
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Keep-mask pruning the `floor(rate · n)` lowest scores; ties prune the
/// lower index.
pub fn keep_mask(scores: &[f64], rate: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut keep = vec![true; scores.len()];
    for &i in &order[..pruned_count(scores.len(), rate)] {
        keep[i] = false;
    }
    keep
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningScheduleMode {
    /// Dense fine-tuning for the warmup, then the target rate, frozen.
    #[default]
    Baseline,
    /// Rate rises exponentially towards the target; frozen once reached.
    Exponential,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSchedule {
    #[serde(default)]
    pub mode: PruningScheduleMode,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Exponential ramp length after the warmup.
    #[serde(default)]
    pub epochs: usize,
    /// Exponential starting rate.
    #[serde(default)]
    pub init_rate: f64,
}

/// Rate and freeze flag at `epoch`.
pub fn pruning_rate_at_epoch(spec: &PruningSchedule, target: f64, epoch: usize) -> Result<(f64, bool)> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("pruning rate {target} outside [0, 1)")));
    }
    if !(0.0..=target).contains(&spec.init_rate) {
        return Err(Error::InvalidArgument(format!(
            "initial pruning rate {} outside [0, target]",
            spec.init_rate
        )));
    }
    if epoch < spec.warmup_epochs {
        return Ok((0.0, false));
    }
    match spec.mode {
        PruningScheduleMode::Baseline => Ok((target, true)),
        PruningScheduleMode::Exponential => {
            let e = epoch - spec.warmup_epochs;
            if e >= spec.epochs {
                return Ok((target, true));
            }
            let p = target - (target - spec.init_rate) * (-5.0 * e as f64 / spec.epochs as f64).exp();
            Ok((p.min(target), false))
        }
    }
}

/// A channel keep-mask flowing along an edge, tagged with the convolution
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMask {
    pub origin: String,
    pub keep: Vec<bool>,
}

/// Outcome of mask propagation.
#[derive(Clone, Debug, Default)]
pub struct MaskPropagation {
    /// Convolutions whose masks every downstream consumer accepts.
    pub prunable: BTreeSet<String>,
    /// Convolutions whose masks were reset to all-ones.
    pub blocked: BTreeSet<String>,
    /// Mask arriving at each node's first input.
    pub input_masks: HashMap<String, ChannelMask>,
}

/// Flows `masks` (conv id → keep per output channel) through the graph.
/// Junctions that cannot accept a mask reset every convolution feeding
/// them, and the pass repeats until it is consistent.
pub fn propagate_pruning_masks(graph: &ModelGraph, masks: &BTreeMap<String, Vec<bool>>) -> Result<MaskPropagation> {
    let mut blocked = BTreeSet::new();
    loop {
        match propagate_once(graph, masks, &blocked)? {
            Ok(input_masks) => {
                return Ok(MaskPropagation {
                    prunable: masks.keys().filter(|k| !blocked.contains(*k)).cloned().collect(),
                    blocked,
                    input_masks,
                });
            }
            Err(origins) => {
                let before = blocked.len();
                blocked.extend(origins);
                if blocked.len() == before {
                    return Err(Error::Graph("mask propagation failed to converge".into()));
                }
            }
        }
    }
}

type Propagated = std::result::Result<HashMap<String, ChannelMask>, Vec<String>>;

fn propagate_once(
    graph: &ModelGraph,
    masks: &BTreeMap<String, Vec<bool>>,
    blocked: &BTreeSet<String>,
) -> Result<Propagated> {
    let mut out: HashMap<&str, Option<ChannelMask>> = HashMap::new();
    out.insert(INPUT, None);
    let mut input_masks = HashMap::new();
    let reject = |m: &Option<ChannelMask>| m.iter().map(|m| m.origin.clone()).collect::<Vec<_>>();
    for node in graph.nodes() {
        if node.kind.param_target().is_some() {
            continue;
        }
        let ins: Vec<Option<ChannelMask>> = node.inputs.iter().map(|i| out[i.as_str()].clone()).collect();
        if let Some(Some(m)) = ins.first() {
            input_masks.insert(node.id.clone(), m.clone());
        }
        let result = match &node.kind {
            LayerKind::Conv2d { out_channels, .. } => match masks.get(&node.id) {
                Some(keep) if !blocked.contains(&node.id) => {
                    if keep.len() != *out_channels {
                        return Err(shape_err(
                            "propagate_pruning_masks",
                            format!(
                                "`{}` mask has {} entries for {out_channels} filters",
                                node.id,
                                keep.len()
                            ),
                        ));
                    }
                    Some(ChannelMask {
                        origin: node.id.clone(),
                        keep: keep.clone(),
                    })
                }
                _ => None,
            },
            LayerKind::BatchNorm { channels, .. } => {
                if let Some(m) = &ins[0] {
                    if m.keep.len() != *channels {
                        return Err(shape_err(
                            "propagate_pruning_masks",
                            format!("`{}` receives a mask of {} channels", node.id, m.keep.len()),
                        ));
                    }
                }
                ins[0].clone()
            }
            LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::FakeQuantize { .. } => ins[0].clone(),
            LayerKind::Flatten => {
                let per: usize = graph.shape_of(&node.inputs[0])?[1..].iter().product();
                ins[0].as_ref().map(|m| ChannelMask {
                    origin: m.origin.clone(),
                    keep: m.keep.iter().flat_map(|&k| std::iter::repeat_n(k, per)).collect(),
                })
            }
            LayerKind::FullyConnected { .. } => None,
            LayerKind::Add => {
                if ins[0] != ins[1] {
                    let mut o = reject(&ins[0]);
                    o.extend(reject(&ins[1]));
                    return Ok(Err(o));
                }
                ins[0].clone()
            }
            LayerKind::BinarizeActivations | LayerKind::BinarizeWeights { .. } => {
                if ins[0].is_some() {
                    return Ok(Err(reject(&ins[0])));
                }
                None
            }
        };
        out.insert(node.id.as_str(), result);
    }
    let o = &out[graph.output()];
    if o.is_some() {
        return Ok(Err(reject(o)));
    }
    Ok(Ok(input_masks))
}

fn kept(keep: &[bool]) -> Vec<usize> {
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

fn slice(p: &Param, axis: usize, keep: &[bool]) -> Result<Param> {
    Ok(Param::new(p.read().select(axis, &kept(keep))?))
}

/// Copy of a hook-free `graph` with the masked filters removed and every
/// consumer sliced to match. Fails if any masked convolution cannot be
/// pruned.
pub fn strip_pruned_filters(graph: &ModelGraph, masks: &BTreeMap<String, Vec<bool>>) -> Result<ModelGraph> {
    if !graph.hooks().is_empty() {
        return Err(Error::Graph("strip a graph only after its hooks are exported".into()));
    }
    let prop = propagate_pruning_masks(graph, masks)?;
    if !prop.blocked.is_empty() {
        return Err(Error::NotPrunable(
            prop.blocked.into_iter().collect::<Vec<_>>().join(", "),
        ));
    }
    let mut stripped = ModelGraph::new(graph.input_shape().to_vec());
    for node in graph.nodes() {
        let mut kind = node.kind.clone();
        let mut params: BTreeMap<String, Param> = node
            .params
            .iter()
            .map(|(k, p)| (k.clone(), Param::new(p.snapshot())))
            .collect();
        let input = prop.input_masks.get(&node.id).map(|m| m.keep.as_slice());
        match &mut kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                if let Some(k) = input {
                    params.insert("weight".into(), slice(&params["weight"], 1, k)?);
                    *in_channels = kept(k).len();
                }
                if let Some(k) = masks.get(&node.id) {
                    params.insert("weight".into(), slice(&params["weight"], 0, k)?);
                    if let Some(b) = params.get("bias").cloned() {
                        params.insert("bias".into(), slice(&b, 0, k)?);
                    }
                    *out_channels = kept(k).len();
                }
            }
            LayerKind::BatchNorm { channels, .. } => {
                if let Some(k) = input {
                    for p in params.values_mut() {
                        *p = slice(p, 0, k)?;
                    }
                    *channels = kept(k).len();
                }
            }
            LayerKind::FullyConnected { in_features, .. } => {
                if let Some(k) = input {
                    params.insert("weight".into(), slice(&params["weight"], 1, k)?);
                    *in_features = kept(k).len();
                }
            }
            LayerKind::FakeQuantize {
                spec,
                zero_points,
                target: Some(t),
            } if spec.per_channel => {
                if let Some(k) = masks.get(&t.node).filter(|k| k.len() == zero_points.len()) {
                    for p in params.values_mut() {
                        *p = slice(p, 0, k)?;
                    }
                    *zero_points = kept(k).iter().map(|&i| zero_points[i]).collect();
                }
            }
            _ => {}
        }
        stripped.push_node(Node {
            id: node.id.clone(),
            kind,
            inputs: node.inputs.clone(),
            params,
            out_shape: vec![],
        })?;
    }
    stripped.set_output(graph.output())?;
    Ok(stripped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningConfig {
    #[serde(default)]
    pub criterion: Criterion,
    pub pruning_rate: f64,
    #[serde(default)]
    pub scheduler: PruningSchedule,
    /// Node-id regexes of convolutions to keep whole; `None` excludes the
    /// convolutions that feed a fully connected head.
    #[serde(default)]
    pub exclude: Option<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct PrunedLayer {
    pub node: String,
    pub weight: Param,
    /// Output-channel keep mask.
    pub keep: Vec<bool>,
    hooks: Vec<(Param, Arc<MaskHook>)>,
}

impl PrunedLayer {
    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    fn set_keep(&mut self, keep: Vec<bool>) -> Result<()> {
        for (p, h) in &self.hooks {
            let shape = p.read().shape().to_vec();
            let per = shape[1..].iter().product::<usize>();
            let data = keep
                .iter()
                .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, per))
                .collect();
            h.set_mask(Tensor::new(shape, data)?)?;
        }
        self.keep = keep;
        Ok(())
    }

    /// Zeroes the pruned slices of every hooked parameter, or of their
    /// gradients.
    fn zero_pruned(&self, grads: bool) {
        for (p, _) in &self.hooks {
            let mut t = p.write();
            let per = t.len() / self.keep.len();
            let target: &mut [f64] = if grads {
                match t.grad.as_mut() {
                    Some(g) => g,
                    None => continue,
                }
            } else {
                t.data_mut()
            };
            for (chunk, &k) in target.chunks_mut(per).zip(&self.keep) {
                if !k {
                    chunk.fill(0.0);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningStats {
    pub rate: f64,
    pub frozen: bool,
    /// Layer id to (pruned filters, total filters).
    pub layers: BTreeMap<String, (usize, usize)>,
    /// Convolutions left whole because a consumer cannot take their mask.
    pub blocked: Vec<String>,
}

/// Filter pruning attached to a graph.
#[derive(Debug)]
pub struct PruningAlgorithm {
    pub config: PruningConfig,
    pub epoch: usize,
    pub rate: f64,
    pub frozen: bool,
    pub layers: Vec<PrunedLayer>,
    pub blocked: Vec<String>,
}

/// Convolutions not excluded by `config`.
pub fn pruning_candidates(graph: &ModelGraph, config: &PruningConfig) -> Result<Vec<String>> {
    let convs: Vec<String> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Conv2d { .. }))
        .map(|n| n.id.clone())
        .collect();
    Ok(match &config.exclude {
        None => convs.into_iter().filter(|c| !feeds_fc(graph, c)).collect(),
        Some(patterns) => {
            let res = compile_patterns(patterns)?;
            for (p, re) in patterns.iter().zip(&res) {
                if !convs.iter().any(|c| re.is_match(c)) {
                    log::warn!("pruning exclude pattern `{p}` matches no convolution");
                }
            }
            convs
                .into_iter()
                .filter(|c| !res.iter().any(|r| r.is_match(c)))
                .collect()
        }
    })
}

/// Hooks output-channel masks onto every prunable convolution (weight and
/// bias) and onto the batch norms its channels flow into.
pub fn apply_filter_pruning(graph: &mut ModelGraph, config: &PruningConfig) -> Result<PruningAlgorithm> {
    let (rate, freeze) = pruning_rate_at_epoch(&config.scheduler, config.pruning_rate, 0)?;
    let candidates = pruning_candidates(graph, config)?;
    let probe: BTreeMap<String, Vec<bool>> = candidates
        .iter()
        .map(|c| Ok((c.clone(), vec![true; graph.node(c)?.out_shape()[0]])))
        .collect::<Result<_>>()?;
    let prop = propagate_pruning_masks(graph, &probe)?;
    for b in &prop.blocked {
        log::warn!("convolution `{b}` is not prunable: a downstream consumer cannot accept its mask");
    }
    let mut followers: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for node in graph.nodes() {
        if matches!(node.kind, LayerKind::BatchNorm { .. }) {
            if let Some(m) = prop.input_masks.get(&node.id) {
                followers.entry(m.origin.clone()).or_default().push(node.id.clone());
            }
        }
    }
    let mut layers = Vec::new();
    for id in &prop.prunable {
        let node = graph.node(id)?;
        let weight = node.param("weight").expect("conv weight").clone();
        let n = weight.read().shape()[0];
        let mut targets = vec![(id.clone(), "weight".to_string())];
        if node.param("bias").is_some() {
            targets.push((id.clone(), "bias".into()));
        }
        for bn in followers.get(id).into_iter().flatten() {
            targets.push((bn.clone(), "gamma".into()));
            targets.push((bn.clone(), "beta".into()));
        }
        let mut hooks = Vec::new();
        for (node_id, pname) in targets {
            let p = graph.node(&node_id)?.param(&pname).expect("listed parameter").clone();
            let h = Arc::new(MaskHook::new(Family::Pruning, Tensor::ones(p.read().shape())));
            graph.insert_hook(HookPoint::pre_param(&node_id, &pname), h.clone())?;
            hooks.push((p, h));
        }
        layers.push(PrunedLayer {
            node: id.clone(),
            weight,
            keep: vec![true; n],
            hooks,
        });
    }
    let mut alg = PruningAlgorithm {
        config: config.clone(),
        epoch: 0,
        rate: 0.0,
        frozen: false,
        layers,
        blocked: prop.blocked.into_iter().collect(),
    };
    alg.set_rate(rate)?;
    if freeze {
        alg.freeze();
    }
    Ok(alg)
}

impl PruningAlgorithm {
    /// Re-selects the pruned filters of every layer at `rate` from the
    /// current weights.
    pub fn set_rate(&mut self, rate: f64) -> Result<()> {
        let criterion = self.config.criterion;
        let weights: Vec<Tensor> = self.layers.iter().map(|l| l.weight.snapshot()).collect();
        let scores = map_indices(weights.len(), |i| filter_importance(&weights[i], criterion));
        for (layer, s) in self.layers.iter_mut().zip(scores) {
            let keep = match s {
                Ok(s) => keep_mask(&s, rate),
                Err(e) => {
                    log::warn!("skipping `{}`: {e}", layer.node);
                    vec![true; layer.keep.len()]
                }
            };
            layer.set_keep(keep)?;
        }
        self.rate = rate;
        Ok(())
    }

    /// Fixes the current selection and zeroes the pruned parameters.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for l in &self.layers {
            l.zero_pruned(false);
        }
    }

    pub fn epoch_step(&mut self) -> Result<()> {
        self.epoch += 1;
        if self.frozen {
            return Ok(());
        }
        let (rate, freeze) = pruning_rate_at_epoch(&self.config.scheduler, self.config.pruning_rate, self.epoch)?;
        if rate != self.rate {
            self.set_rate(rate)?;
        }
        if freeze {
            self.freeze();
        }
        Ok(())
    }

    /// Frozen filters get no gradient.
    pub fn after_backward(&self) {
        if self.frozen {
            for l in &self.layers {
                l.zero_pruned(true);
            }
        }
    }

    /// Frozen filters stay at zero through weight decay and momentum.
    pub fn after_step(&self) {
        if self.frozen {
            for l in &self.layers {
                l.zero_pruned(false);
            }
        }
    }

    pub fn masks(&self) -> BTreeMap<String, Vec<bool>> {
        self.layers.iter().map(|l| (l.node.clone(), l.keep.clone())).collect()
    }

    /// Restores a saved selection.
    pub fn set_masks(&mut self, masks: &BTreeMap<String, Vec<bool>>) -> Result<()> {
        for l in &mut self.layers {
            if let Some(k) = masks.get(&l.node) {
                if k.len() != l.keep.len() {
                    return Err(shape_err("set_masks", format!("`{}` mask length {}", l.node, k.len())));
                }
                l.set_keep(k.clone())?;
            }
        }
        Ok(())
    }

    pub fn statistics(&self) -> PruningStats {
        PruningStats {
            rate: self.rate,
            frozen: self.frozen,
            layers: self
                .layers
                .iter()
                .map(|l| (l.node.clone(), (l.pruned(), l.keep.len())))
                .collect(),
            blocked: self.blocked.clone(),
        }
    }
}
