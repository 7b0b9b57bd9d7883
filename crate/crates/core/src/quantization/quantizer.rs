use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::ops::{AsymmetricFakeQuant, ScaleGradient, SymmetricFakeQuant, TunedFakeQuant};
use super::{tune_asymmetric_range, QuantMode, QuantRole, QuantizerSpec, TunedRange, RANGE_FLOOR};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{
    ExportAction, Family, ForwardContext, HookPoint, HookPosition, HookTransform, LayerKind, Mode, ModelGraph, Param,
    ParamTarget, INPUT,
};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum RangeParams {
    Symmetric {
        scale: Param,
    },
    /// Raw trainable bounds; tuned before every use.
    Asymmetric {
        low: Param,
        high: Param,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Weight,
    Activation,
}

#[derive(Debug, Default)]
struct Observer {
    min: f64,
    max: f64,
    batches: usize,
}

/// A fake-quantize hook together with its trainable range.
#[derive(Debug)]
pub struct QuantizerHandle {
    pub point: HookPoint,
    pub kind: QuantizerKind,
    spec: RwLock<QuantizerSpec>,
    range: RangeParams,
    gradient: ScaleGradient,
    observer: Mutex<Observer>,
}

impl QuantizerHandle {
    pub fn new(
        point: HookPoint,
        kind: QuantizerKind,
        spec: QuantizerSpec,
        channels: usize,
        gradient: ScaleGradient,
    ) -> Result<Self> {
        spec.levels()?;
        if spec.per_channel && kind == QuantizerKind::Activation {
            return Err(Error::Quantizer("activations are quantized per tensor".into()));
        }
        let n = if spec.per_channel { channels } else { 1 };
        let range = match spec.mode {
            QuantMode::Symmetric => RangeParams::Symmetric {
                scale: Param::new(Tensor::ones(&[n]).with_requires_grad(true)),
            },
            QuantMode::Asymmetric => RangeParams::Asymmetric {
                low: Param::new(Tensor::full(&[n], -1.0).with_requires_grad(true)),
                high: Param::new(Tensor::ones(&[n]).with_requires_grad(true)),
            },
        };
        Ok(QuantizerHandle {
            point,
            kind,
            spec: RwLock::new(spec),
            range,
            gradient,
            observer: Mutex::new(Observer::default()),
        })
    }

    pub fn spec(&self) -> QuantizerSpec {
        *self.spec.read()
    }

    pub fn set_bits(&self, bits: u32) -> Result<()> {
        let mut spec = self.spec.write();
        let candidate = QuantizerSpec { bits, ..*spec };
        candidate.levels()?;
        *spec = candidate;
        Ok(())
    }

    pub fn range(&self) -> &RangeParams {
        &self.range
    }

    pub fn params(&self) -> Vec<Param> {
        match &self.range {
            RangeParams::Symmetric { scale } => vec![scale.clone()],
            RangeParams::Asymmetric { low, high } => vec![low.clone(), high.clone()],
        }
    }

    /// Symmetric scales as used by the forward (floored).
    pub fn effective_scales(&self) -> Option<Vec<f64>> {
        match &self.range {
            RangeParams::Symmetric { scale } => Some(scale.read().data().iter().map(|s| s.max(RANGE_FLOOR)).collect()),
            RangeParams::Asymmetric { .. } => None,
        }
    }

    pub fn tuned_ranges(&self) -> Option<Vec<TunedRange>> {
        match &self.range {
            RangeParams::Asymmetric { low, high } => {
                let bits = self.spec().bits;
                Some(
                    low.read()
                        .data()
                        .iter()
                        .zip(high.read().data())
                        .map(|(&l, &h)| tune_asymmetric_range(l, h, bits))
                        .collect(),
                )
            }
            RangeParams::Symmetric { .. } => None,
        }
    }

    /// Sets the range from a tensor's own values: `max|.|` or min/max, slice
    /// by slice along axis 0 when per-channel.
    pub fn init_from_tensor(&self, t: &Tensor) -> Result<()> {
        let n = self.params()[0].read().len();
        let per = super::slice_len(t, n)?;
        let chunks = t.data().chunks(per);
        match &self.range {
            RangeParams::Symmetric { scale } => {
                let vals: Vec<f64> = chunks
                    .map(|c| c.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(RANGE_FLOOR))
                    .collect();
                scale.write().data_mut().copy_from_slice(&vals);
            }
            RangeParams::Asymmetric { low, high } => {
                let (mut lo, mut hi) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for c in chunks {
                    lo.push(c.iter().copied().fold(f64::INFINITY, f64::min));
                    hi.push(c.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
                low.write().data_mut().copy_from_slice(&lo);
                high.write().data_mut().copy_from_slice(&hi);
            }
        }
        Ok(())
    }

    fn observe(&self, t: &Tensor) {
        let mut o = self.observer.lock();
        let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if o.batches == 0 {
            o.min = lo;
            o.max = hi;
        } else {
            o.min = o.min.min(lo);
            o.max = o.max.max(hi);
        }
        o.batches += 1;
    }

    /// Applies the statistics gathered during calibration passes.
    fn finish_observation(&self) -> Result<()> {
        let mut o = self.observer.lock();
        if o.batches == 0 {
            return Err(Error::InvalidArgument(format!(
                "quantizer at {} observed no data",
                self.point
            )));
        }
        match &self.range {
            RangeParams::Symmetric { scale } => {
                let m = o.min.abs().max(o.max.abs()).max(RANGE_FLOOR);
                scale.write().data_mut().fill(m);
            }
            RangeParams::Asymmetric { low, high } => {
                low.write().data_mut().fill(o.min);
                high.write().data_mut().fill(o.max);
            }
        }
        *o = Observer::default();
        Ok(())
    }

    fn target(&self) -> Option<ParamTarget> {
        match &self.point.position {
            HookPosition::PreParam(p) => Some(ParamTarget {
                node: self.point.node.clone(),
                param: p.clone(),
            }),
            _ => None,
        }
    }
}

impl HookTransform for QuantizerHandle {
    fn family(&self) -> Family {
        Family::Quantization
    }

    fn apply(&self, ctx: &mut ForwardContext<'_>, _: &HookPoint, x: Var) -> Result<Var> {
        if ctx.mode() == Mode::Calibrate && self.kind == QuantizerKind::Activation {
            self.observe(ctx.tape.value(x));
            return Ok(x);
        }
        let spec = self.spec();
        match &self.range {
            RangeParams::Symmetric { scale } => {
                let s = ctx.param(scale);
                Arc::new(SymmetricFakeQuant::new(spec.bits, spec.role, self.gradient)?).apply(&mut ctx.tape, x, s)
            }
            RangeParams::Asymmetric { low, high } => {
                let (l, h) = (ctx.param(low), ctx.param(high));
                Arc::new(AsymmetricFakeQuant::new(spec.bits)?).apply(&mut ctx.tape, x, l, h)
            }
        }
    }

    fn export(&self, _: &HookPoint) -> Result<ExportAction> {
        let spec = self.spec();
        let mut params = BTreeMap::new();
        let zero_points = match &self.range {
            RangeParams::Symmetric { .. } => {
                let s = self.effective_scales().expect("symmetric");
                let n = s.len();
                params.insert("scale".to_string(), Tensor::new(vec![n], s)?);
                vec![0; n]
            }
            RangeParams::Asymmetric { .. } => {
                let r = self.tuned_ranges().expect("asymmetric");
                let n = r.len();
                params.insert(
                    "low".to_string(),
                    Tensor::new(vec![n], r.iter().map(|r| r.low).collect())?,
                );
                params.insert(
                    "high".to_string(),
                    Tensor::new(vec![n], r.iter().map(|r| r.high).collect())?,
                );
                r.iter().map(|r| r.zero_point).collect()
            }
        };
        Ok(ExportAction::Node {
            kind: LayerKind::FakeQuantize {
                spec,
                zero_points,
                target: self.target(),
            },
            params,
        })
    }
}

/// Forward of an exported FakeQuantize node.
pub(crate) fn exported_fake_quant(
    ctx: &mut ForwardContext<'_>,
    x: Var,
    spec: &QuantizerSpec,
    zero_points: &[i64],
    params: &BTreeMap<String, Param>,
) -> Result<Var> {
    let get = |name: &str| {
        params
            .get(name)
            .ok_or_else(|| Error::Format(format!("fake-quantize node lacks `{name}`")))
    };
    match spec.mode {
        QuantMode::Symmetric => {
            let s = ctx.param(get("scale")?);
            Arc::new(SymmetricFakeQuant::new(spec.bits, spec.role, ScaleGradient::Exact)?).apply(&mut ctx.tape, x, s)
        }
        QuantMode::Asymmetric => {
            let (lo, hi) = (get("low")?.read().clone(), get("high")?.read().clone());
            if lo.len() != zero_points.len() || hi.len() != zero_points.len() {
                return Err(Error::Format("fake-quantize range and zero-point counts differ".into()));
            }
            let ranges = lo
                .data()
                .iter()
                .zip(hi.data())
                .zip(zero_points)
                .map(|((&low, &high), &zero_point)| TunedRange { low, high, zero_point })
                .collect();
            Arc::new(TunedFakeQuant {
                bits: spec.bits,
                ranges,
            })
            .apply(&mut ctx.tape, x)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionPolicy {
    pub mode: QuantMode,
    pub bits: u32,
    pub per_channel: bool,
    pub quantize_input: bool,
    pub scale_gradient: ScaleGradient,
}

impl Default for InsertionPolicy {
    fn default() -> Self {
        InsertionPolicy {
            mode: QuantMode::Symmetric,
            bits: 8,
            per_channel: false,
            quantize_input: true,
            scale_gradient: ScaleGradient::Exact,
        }
    }
}

fn sole_consumer<'g>(graph: &'g ModelGraph, id: &str) -> Option<&'g crate::graph::Node> {
    match graph.consumers(id).as_slice() {
        [only] if graph.output() != id => Some(only),
        _ => None,
    }
}

/// True for nodes inside a Conv -> ReLU or Conv -> BN -> ReLU chain whose
/// output is not quantized because the chain runs as one op at inference.
fn fused_interior(graph: &ModelGraph, id: &str) -> bool {
    let Ok(node) = graph.node(id) else {
        return false;
    };
    let is = |n: Option<&crate::graph::Node>, f: fn(&LayerKind) -> bool| n.map(|n| f(&n.kind)).unwrap_or(false);
    let conv = |k: &LayerKind| matches!(k, LayerKind::Conv2d { .. });
    let bn = |k: &LayerKind| matches!(k, LayerKind::BatchNorm { .. });
    let relu = |k: &LayerKind| matches!(k, LayerKind::Relu);
    match node.kind {
        LayerKind::Conv2d { .. } => {
            let next = sole_consumer(graph, id);
            if is(next, relu) {
                return true;
            }
            if is(next, bn) {
                return is(sole_consumer(graph, &next.expect("checked").id), relu);
            }
            false
        }
        LayerKind::BatchNorm { .. } => {
            let producer = graph.node(&node.inputs[0]).ok();
            is(producer, conv)
                && sole_consumer(graph, &node.inputs[0])
                    .map(|n| n.id == id)
                    .unwrap_or(false)
                && is(sole_consumer(graph, id), relu)
        }
        _ => false,
    }
}

/// Hooks weight quantizers onto every Conv2d / FullyConnected weight and
/// activation quantizers after every value-producing node except fused
/// interiors. Returns the quantizers in insertion order.
pub fn insert_quantizers(graph: &mut ModelGraph, policy: &InsertionPolicy) -> Result<Vec<Arc<QuantizerHandle>>> {
    let mut out = Vec::new();
    let act_spec = |role| QuantizerSpec {
        mode: policy.mode,
        bits: policy.bits,
        role,
        per_channel: false,
    };
    if policy.quantize_input {
        let point = HookPoint::post_output(INPUT);
        out.push(Arc::new(QuantizerHandle::new(
            point,
            QuantizerKind::Activation,
            act_spec(QuantRole::SignedAct),
            1,
            policy.scale_gradient,
        )?));
    }
    let ids: Vec<(String, LayerKind)> = graph
        .nodes()
        .iter()
        .filter(|n| n.kind.param_target().is_none())
        .map(|n| (n.id.clone(), n.kind.clone()))
        .collect();
    for (id, kind) in &ids {
        if let LayerKind::Conv2d { out_channels: c, .. } | LayerKind::FullyConnected { out_features: c, .. } = kind {
            let spec = QuantizerSpec {
                mode: policy.mode,
                bits: policy.bits,
                role: QuantRole::Weights,
                per_channel: policy.per_channel,
            };
            out.push(Arc::new(QuantizerHandle::new(
                HookPoint::pre_param(id, "weight"),
                QuantizerKind::Weight,
                spec,
                *c,
                policy.scale_gradient,
            )?));
        }
        let produces = matches!(
            kind,
            LayerKind::Conv2d { .. }
                | LayerKind::FullyConnected { .. }
                | LayerKind::BatchNorm { .. }
                | LayerKind::Relu
                | LayerKind::Add
        );
        if produces && !fused_interior(graph, id) {
            let role = if matches!(kind, LayerKind::Relu) {
                QuantRole::UnsignedAct
            } else {
                QuantRole::SignedAct
            };
            out.push(Arc::new(QuantizerHandle::new(
                HookPoint::post_output(id),
                QuantizerKind::Activation,
                act_spec(role),
                1,
                policy.scale_gradient,
            )?));
        }
    }
    for q in &out {
        graph.insert_hook(q.point.clone(), q.clone())?;
    }
    Ok(out)
}

/// Data-driven range initialization: weight quantizers from the weights,
/// activation quantizers from min/max over the first `n_batches` batches.
pub fn initialize_quantizer_ranges(
    graph: &ModelGraph,
    quantizers: &[Arc<QuantizerHandle>],
    batches: &[Tensor],
    n_batches: usize,
) -> Result<()> {
    for q in quantizers.iter().filter(|q| q.kind == QuantizerKind::Weight) {
        let name = q.point.param_name().expect("weight quantizers sit on parameters");
        let w = graph
            .node(&q.point.node)?
            .param(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter for {}", q.point)))?
            .read()
            .clone();
        q.init_from_tensor(&w)?;
    }
    if !quantizers.iter().any(|q| q.kind == QuantizerKind::Activation) {
        return Ok(());
    }
    if n_batches == 0 || batches.is_empty() {
        return Err(Error::InvalidArgument(
            "range initialization needs at least one batch".into(),
        ));
    }
    for batch in batches.iter().take(n_batches) {
        let mut ctx = ForwardContext::new(Mode::Calibrate);
        let x = ctx.tape.constant(batch.clone());
        graph.forward(&mut ctx, x)?;
    }
    for q in quantizers.iter().filter(|q| q.kind == QuantizerKind::Activation) {
        q.finish_observation()?;
    }
    Ok(())
}
