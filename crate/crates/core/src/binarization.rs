//! Weight binarization (XNOR / DoReFa scales), scale-threshold activation
//! binarization, and the staged training schedule.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, StraightThrough, Var};
use crate::error::{shape_err, Error, Result};
use crate::graph::{
    compile_patterns, feeds_fc, ExportAction, Family, ForwardContext, HookPoint, HookPosition, HookTransform,
    LayerKind, Mode, ModelGraph, Param, ParamTarget,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// One scale per input channel.
    Xnor,
    /// One scale per tensor.
    Dorefa,
}

/// `mean|W|` over the whole tensor (DoReFa) or per input channel (XNOR).
pub fn weight_scales(w: &Tensor, scheme: WeightScheme) -> Result<Vec<f64>> {
    let s = w.shape();
    if s.len() != 4 {
        return Err(shape_err(
            "binarize_weights",
            format!("expected [out, in, kH, kW], got {s:?}"),
        ));
    }
    Ok(match scheme {
        WeightScheme::Dorefa => vec![w.data().iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64],
        WeightScheme::Xnor => {
            let (o, c, k) = (s[0], s[1], s[2] * s[3]);
            let mut sums = vec![0.0; c];
            for (i, x) in w.data().iter().enumerate() {
                sums[(i / k) % c] += x.abs();
            }
            sums.iter().map(|v| v / (o * k) as f64).collect()
        }
    })
}

/// `alpha * sign(W)` with `sign(0) = +1`.
pub fn binarize_weights(w: &Tensor, scheme: WeightScheme) -> Result<Tensor> {
    let scales = weight_scales(w, scheme)?;
    let s = w.shape();
    let k = s[2] * s[3];
    let c = s[1];
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let a = match scheme {
                WeightScheme::Dorefa => scales[0],
                WeightScheme::Xnor => scales[(i / k) % c],
            };
            if x >= 0.0 {
                a
            } else {
                -a
            }
        })
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Binarizes a weight on the tape; the gradient passes straight through.
pub fn binarize_weights_var(ctx: &mut ForwardContext<'_>, w: Var, scheme: WeightScheme) -> Result<Var> {
    let out = binarize_weights(ctx.tape.value(w), scheme)?;
    Ok(ctx.tape.custom(&[w], out, Arc::new(StraightThrough)))
}

/// `s * H(x - s * t_c)` per channel `c` (axis 1), `H(0) = 0`.
pub fn binarize_activations(x: &Tensor, s: f64, t: &[f64]) -> Result<Tensor> {
    let (per, c) = channel_layout(x.shape(), t.len())?;
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "activation scale must be positive, got {s}"
        )));
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v - s * t[(i / per) % c] > 0.0 { s } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Elements per channel plane and channel count for a `[N, C, ...]` input.
fn channel_layout(shape: &[usize], thresholds: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != thresholds {
        return Err(shape_err(
            "binarize_activations",
            format!("{thresholds} thresholds for input {shape:?}"),
        ));
    }
    Ok((shape[2..].iter().product(), shape[1]))
}

/// Surrogate gradients with a unit-slope Heaviside: input `s`, scale
/// `H(u) - s t`, threshold `-s^2`.
#[derive(Debug)]
struct ActivationBinarizeOp;

impl CustomOp for ActivationBinarizeOp {
    fn name(&self) -> &'static str {
        "binarize_activations"
    }

    fn backward(&self, up: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, s, t) = (inputs[0], inputs[1].item(), inputs[2]);
        let (per, c) = channel_layout(x.shape(), t.len())?;
        let mut gs = 0.0;
        let mut gt = vec![0.0; c];
        let gx: Vec<f64> = up.data().iter().map(|u| u * s).collect();
        for (i, &u) in up.data().iter().enumerate() {
            let ch = (i / per) % c;
            let h = if out.data()[i] > 0.0 { 1.0 } else { 0.0 };
            gs += u * (h - s * t.data()[ch]);
            gt[ch] -= u * s * s;
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), gx)?),
            Some(Tensor::scalar(gs)),
            Some(Tensor::new(vec![c], gt)?),
        ])
    }
}

pub fn binarize_activations_var(ctx: &mut ForwardContext<'_>, x: Var, s: Var, t: Var) -> Result<Var> {
    let sv = ctx.tape.value(s).item();
    let out = binarize_activations(ctx.tape.value(x), sv, ctx.tape.value(t).data())?;
    Ok(ctx.tape.custom(&[x, s, t], out, Arc::new(ActivationBinarizeOp)))
}

/// Active stage and the flags it implies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageInfo {
    pub stage: u8,
    pub activations: bool,
    pub weights: bool,
    /// Multiplier applied to the base learning rate.
    pub lr_factor: f64,
    pub weight_decay: bool,
}

/// Stage 1 full precision, stage 2 binary activations, stage 3 binary
/// weights too, stage 4 the same with `lr * (1 - progress)^2` and no weight
/// decay. Epochs past the schedule stay in stage 4.
pub fn binarization_stage_at(epoch: usize, durations: [i64; 4]) -> Result<StageInfo> {
    if let Some(d) = durations.iter().find(|&&d| d < 0) {
        return Err(Error::InvalidArgument(format!(
            "stage durations must be nonnegative, got {d}"
        )));
    }
    let d: Vec<usize> = durations.iter().map(|&d| d as usize).collect();
    let e = epoch;
    let (b1, b2, b3) = (d[0], d[0] + d[1], d[0] + d[1] + d[2]);
    let info = |stage, activations, weights, lr_factor, weight_decay| StageInfo {
        stage,
        activations,
        weights,
        lr_factor,
        weight_decay,
    };
    Ok(if e < b1 {
        info(1, false, false, 1.0, true)
    } else if e < b2 {
        info(2, true, false, 1.0, true)
    } else if e < b3 {
        info(3, true, true, 1.0, true)
    } else {
        let progress = if d[3] == 0 {
            1.0
        } else {
            ((e - b3) as f64 / d[3] as f64).min(1.0)
        };
        info(4, true, true, (1.0 - progress).powi(2), false)
    })
}

#[derive(Debug)]
pub struct WeightBinarizer {
    pub point: HookPoint,
    pub scheme: WeightScheme,
    enabled: AtomicBool,
}

impl WeightBinarizer {
    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub fn enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }
}

impl HookTransform for WeightBinarizer {
    fn family(&self) -> Family {
        Family::Binarization
    }

    fn apply(&self, ctx: &mut ForwardContext<'_>, _: &HookPoint, x: Var) -> Result<Var> {
        if !self.enabled() {
            return Ok(x);
        }
        binarize_weights_var(ctx, x, self.scheme)
    }

    fn export(&self, point: &HookPoint) -> Result<ExportAction> {
        if !self.enabled() {
            return Ok(ExportAction::Skip);
        }
        let param = point.param_name().expect("weight hook").to_string();
        Ok(ExportAction::Node {
            kind: LayerKind::BinarizeWeights {
                scheme: self.scheme,
                target: ParamTarget {
                    node: point.node.clone(),
                    param,
                },
            },
            params: BTreeMap::new(),
        })
    }
}

#[derive(Debug)]
pub struct ActivationBinarizer {
    pub point: HookPoint,
    pub scale: Param,
    pub threshold: Param,
    enabled: AtomicBool,
    observed: Mutex<Option<f64>>,
}

impl ActivationBinarizer {
    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub fn enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    /// Scale from the largest calibration activation (1 if none seen).
    pub fn finish_calibration(&self) {
        let m = self.observed.lock().take().filter(|m| *m > 0.0).unwrap_or(1.0);
        self.scale.write().data_mut()[0] = m;
    }
}

impl HookTransform for ActivationBinarizer {
    fn family(&self) -> Family {
        Family::Binarization
    }

    fn apply(&self, ctx: &mut ForwardContext<'_>, _: &HookPoint, x: Var) -> Result<Var> {
        if ctx.mode() == Mode::Calibrate {
            let m = ctx.tape.value(x).max_abs();
            let mut o = self.observed.lock();
            *o = Some(o.map_or(m, |p| p.max(m)));
            return Ok(x);
        }
        if !self.enabled() {
            return Ok(x);
        }
        let s = ctx.param(&self.scale);
        let t = ctx.param(&self.threshold);
        binarize_activations_var(ctx, x, s, t)
    }

    fn export(&self, _: &HookPoint) -> Result<ExportAction> {
        if !self.enabled() {
            return Ok(ExportAction::Skip);
        }
        let mut params = BTreeMap::new();
        params.insert("scale".to_string(), self.scale.snapshot());
        params.insert("threshold".to_string(), self.threshold.snapshot());
        Ok(ExportAction::Node {
            kind: LayerKind::BinarizeActivations,
            params,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinarizationConfig {
    #[serde(default = "default_scheme")]
    pub weight_scheme: WeightScheme,
    #[serde(default = "default_stages")]
    pub stage_epochs: [i64; 4],
    /// Regexes over node ids; empty means every Conv2d.
    #[serde(default)]
    pub allowlist: Vec<String>,
    /// Regexes over node ids; `None` applies the default denylist (first
    /// conv and convs feeding a fully connected layer).
    #[serde(default)]
    pub denylist: Option<Vec<String>>,
}

fn default_scheme() -> WeightScheme {
    WeightScheme::Xnor
}

fn default_stages() -> [i64; 4] {
    [1, 1, 1, 1]
}

impl Default for BinarizationConfig {
    fn default() -> Self {
        BinarizationConfig {
            weight_scheme: default_scheme(),
            stage_epochs: default_stages(),
            allowlist: Vec::new(),
            denylist: None,
        }
    }
}

/// Binarized layers of a graph.
#[derive(Debug, Default)]
pub struct BinarizedLayers {
    pub layers: Vec<String>,
    pub weights: Vec<Arc<WeightBinarizer>>,
    pub activations: Vec<Arc<ActivationBinarizer>>,
}

impl BinarizedLayers {
    pub fn set_stage(&self, info: &StageInfo) {
        for w in &self.weights {
            w.set_enabled(info.weights);
        }
        for a in &self.activations {
            a.set_enabled(info.activations);
        }
    }

    pub fn params(&self) -> Vec<Param> {
        self.activations
            .iter()
            .flat_map(|a| [a.scale.clone(), a.threshold.clone()])
            .collect()
    }
}

/// Conv layers selected by the allowlist minus the denylist.
pub fn select_layers(graph: &ModelGraph, config: &BinarizationConfig) -> Result<Vec<String>> {
    let convs: Vec<String> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Conv2d { .. }))
        .map(|n| n.id.clone())
        .collect();
    let allow = compile_patterns(&config.allowlist)?;
    let deny = config.denylist.as_deref().map(compile_patterns).transpose()?;
    for (p, re) in config.allowlist.iter().zip(&allow) {
        if !convs.iter().any(|c| re.is_match(c)) {
            log::warn!("binarization allowlist pattern `{p}` matches no convolution");
        }
    }
    if let (Some(d), Some(res)) = (&config.denylist, &deny) {
        for (p, re) in d.iter().zip(res) {
            if !convs.iter().any(|c| re.is_match(c)) {
                log::warn!("binarization denylist pattern `{p}` matches no convolution");
            }
        }
    }
    Ok(convs
        .iter()
        .enumerate()
        .filter(|(_, c)| allow.is_empty() || allow.iter().any(|r| r.is_match(c)))
        .filter(|(i, c)| match &deny {
            Some(res) => !res.iter().any(|r| r.is_match(c)),
            None => *i != 0 && !feeds_fc(graph, c),
        })
        .map(|(_, c)| c.clone())
        .collect())
}

/// Hooks weight and input-activation binarizers onto the selected convs.
/// All binarizers start disabled; stage flags switch them on.
pub fn apply_binarization(graph: &mut ModelGraph, config: &BinarizationConfig) -> Result<BinarizedLayers> {
    let layers = select_layers(graph, config)?;
    let mut out = BinarizedLayers {
        layers: layers.clone(),
        ..Default::default()
    };
    for id in &layers {
        let node = graph.node(id)?;
        let in_channels = match node.kind {
            LayerKind::Conv2d { in_channels, .. } => in_channels,
            _ => unreachable!("selected layers are convolutions"),
        };
        let w = Arc::new(WeightBinarizer {
            point: HookPoint::pre_param(id, "weight"),
            scheme: config.weight_scheme,
            enabled: AtomicBool::new(false),
        });
        let a = Arc::new(ActivationBinarizer {
            point: HookPoint {
                node: id.clone(),
                position: HookPosition::PreInput(0),
            },
            scale: Param::new(Tensor::ones(&[1]).with_requires_grad(true)),
            threshold: Param::new(Tensor::full(&[in_channels], 0.5).with_requires_grad(true)),
            enabled: AtomicBool::new(false),
            observed: Mutex::new(None),
        });
        graph.insert_hook(w.point.clone(), w.clone())?;
        graph.insert_hook(a.point.clone(), a.clone())?;
        out.weights.push(w);
        out.activations.push(a);
    }
    Ok(out)
}
