//! Config-driven stacking of compression algorithms onto a model graph: one
//! controller per algorithm, the combined auxiliary loss, schedule stepping,
//! checkpoints and export to a plain model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::binarization::{apply_binarization, binarization_stage_at, BinarizationConfig, BinarizedLayers, StageInfo};
use crate::error::{shape_err, Error, Result};
use crate::graph::{
    load_model, save_model, ExportAction, ForwardContext, HookPoint, HookPosition, LayerKind, Mode, ModelGraph, Node,
    Param, INPUT,
};
use crate::pruning::{apply_filter_pruning, PruningAlgorithm, PruningConfig, PruningStats};
use crate::quantization::{
    initialize_quantizer_ranges, insert_quantizers, layer_average_traces, quant_range_for, select_bitwidth_config,
    InsertionPolicy, LayerCandidate, MixedPrecisionPlan, QuantMode, QuantRole, QuantizerHandle, QuantizerKind,
    RangeParams, RatioRule, ScaleGradient,
};
use crate::sparsity::{
    apply_sparsity, SparsityAlgorithm, SparsityConfig, SparsityMethod, SparsityScheduler, SparsityStats,
};
use crate::tensor::Tensor;
use crate::train::ParamGroup;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Seed for data-dependent initialization (Hessian probes).
    #[serde(default)]
    pub seed: u64,
    /// Per-sample input shape the model must have.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default)]
    pub init: InitConfig,
    /// Applied in order.
    #[serde(default)]
    pub algorithms: Vec<AlgorithmConfig>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            version: CONFIG_VERSION,
            seed: 0,
            input_shape: None,
            init: InitConfig::default(),
            algorithms: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Batches used for range initialization and calibration.
    #[serde(default = "default_init_batches")]
    pub num_batches: usize,
}

fn default_init_batches() -> usize {
    4
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            num_batches: default_init_batches(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmConfig {
    Quantization(QuantizationConfig),
    Binarization(BinarizationConfig),
    MagnitudeSparsity(SparsityConfig),
    RbSparsity(SparsityConfig),
    FilterPruning(PruningConfig),
}

impl AlgorithmConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Quantization(_) => "quantization",
            AlgorithmConfig::Binarization(_) => "binarization",
            AlgorithmConfig::MagnitudeSparsity(_) => "magnitude_sparsity",
            AlgorithmConfig::RbSparsity(_) => "rb_sparsity",
            AlgorithmConfig::FilterPruning(_) => "filter_pruning",
        }
    }

    fn family(&self) -> &'static str {
        match self {
            AlgorithmConfig::MagnitudeSparsity(_) | AlgorithmConfig::RbSparsity(_) => "sparsity",
            other => other.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationConfig {
    #[serde(default = "default_mode")]
    pub mode: QuantMode,
    #[serde(default = "default_bits")]
    pub bits: u32,
    /// Per-output-channel weight ranges.
    #[serde(default)]
    pub per_channel: bool,
    #[serde(default = "default_true")]
    pub quantize_input: bool,
    #[serde(default)]
    pub scale_gradient: ScaleGradient,
    #[serde(default)]
    pub mixed_precision: Option<MixedPrecisionConfig>,
}

fn default_mode() -> QuantMode {
    QuantMode::Symmetric
}

fn default_bits() -> u32 {
    8
}

fn default_true() -> bool {
    true
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        QuantizationConfig {
            mode: default_mode(),
            bits: default_bits(),
            per_channel: false,
            quantize_input: true,
            scale_gradient: ScaleGradient::default(),
            mixed_precision: None,
        }
    }
}

/// Hessian-guided per-layer weight bit-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedPrecisionConfig {
    #[serde(default = "default_candidates")]
    pub candidate_bits: Vec<u32>,
    /// Bound on the bit-complexity ratio of the all-8-bit model to the
    /// assignment; `rule` gives the direction.
    pub ratio_threshold: f64,
    #[serde(default)]
    pub rule: RatioRule,
    /// Hutchinson probes per layer.
    #[serde(default = "default_samples")]
    pub trace_samples: usize,
    /// Probe seed; defaults to the top-level seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_candidates() -> Vec<u32> {
    vec![4, 8]
}

fn default_samples() -> usize {
    200
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl CompressionConfig {
    /// Parses and validates JSON; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: CompressionConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, a) in self.algorithms.iter().enumerate() {
            let path = format!("algorithms[{i}].{}", a.name());
            if let Some(j) = seen.insert(a.family(), i) {
                return Err(config_err(
                    path,
                    format!("a second {} section (first at algorithms[{j}])", a.family()),
                ));
            }
            match a {
                AlgorithmConfig::Quantization(q) => {
                    quant_range_for(q.bits, QuantRole::Weights)
                        .map_err(|e| config_err(format!("{path}.bits"), e.to_string()))?;
                    if let Some(mp) = &q.mixed_precision {
                        if mp.candidate_bits.is_empty() {
                            return Err(config_err(format!("{path}.mixed_precision.candidate_bits"), "empty"));
                        }
                        for &b in &mp.candidate_bits {
                            quant_range_for(b, QuantRole::Weights).map_err(|e| {
                                config_err(format!("{path}.mixed_precision.candidate_bits"), e.to_string())
                            })?;
                        }
                        if !(mp.ratio_threshold > 0.0) {
                            return Err(config_err(
                                format!("{path}.mixed_precision.ratio_threshold"),
                                "must be positive",
                            ));
                        }
                        if mp.trace_samples == 0 {
                            return Err(config_err(
                                format!("{path}.mixed_precision.trace_samples"),
                                "must be at least 1",
                            ));
                        }
                    }
                }
                AlgorithmConfig::Binarization(b) => {
                    binarization_stage_at(0, b.stage_epochs)
                        .map_err(|e| config_err(format!("{path}.stage_epochs"), e.to_string()))?;
                }
                AlgorithmConfig::MagnitudeSparsity(s) | AlgorithmConfig::RbSparsity(s) => {
                    s.schedule
                        .validate()
                        .map_err(|e| config_err(format!("{path}.schedule"), e.to_string()))?;
                    crate::graph::compile_patterns(&s.ignored)
                        .map_err(|e| config_err(format!("{path}.ignored"), e.to_string()))?;
                }
                AlgorithmConfig::FilterPruning(p) => {
                    crate::pruning::pruning_rate_at_epoch(&p.scheduler, p.pruning_rate, 0)
                        .map_err(|e| config_err(path.clone(), e.to_string()))?;
                    if let Some(ex) = &p.exclude {
                        crate::graph::compile_patterns(ex)
                            .map_err(|e| config_err(format!("{path}.exclude"), e.to_string()))?;
                    }
                }
            }
        }
        let has = |f: &str| seen.get(f).copied();
        if let (Some(_), Some(b)) = (has("quantization"), has("binarization")) {
            return Err(config_err(
                format!("algorithms[{b}]"),
                "binarization cannot be combined with quantization",
            ));
        }
        if let (Some(_), Some(p)) = (has("binarization"), has("filter_pruning")) {
            return Err(config_err(
                format!("algorithms[{p}]"),
                "filter pruning cannot be combined with binarization",
            ));
        }
        if let (Some(b), Some(s)) = (has("binarization"), has("sparsity")) {
            if s > b {
                return Err(config_err(
                    format!("algorithms[{s}]"),
                    "sparsity must come before binarization",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct QuantizationController {
    pub quantizers: Vec<Arc<QuantizerHandle>>,
    pub plan: Option<MixedPrecisionPlan>,
}

#[derive(Debug)]
pub struct BinarizationController {
    pub layers: BinarizedLayers,
    pub stage_epochs: [i64; 4],
    pub epoch: usize,
    pub stage: StageInfo,
}

impl BinarizationController {
    fn set_epoch(&mut self, epoch: usize) -> Result<()> {
        self.epoch = epoch;
        self.stage = binarization_stage_at(epoch, self.stage_epochs)?;
        self.layers.set_stage(&self.stage);
        Ok(())
    }
}

/// Runtime handle of one algorithm.
#[derive(Debug)]
pub enum Controller {
    Quantization(QuantizationController),
    Binarization(BinarizationController),
    Sparsity(SparsityAlgorithm),
    Pruning(PruningAlgorithm),
}

/// Range and precision of one quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerStats {
    pub point: String,
    pub kind: QuantizerKind,
    pub mode: QuantMode,
    pub bits: u32,
    pub role: QuantRole,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high: Option<Vec<f64>>,
    pub zero_points: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ControllerStats {
    Quantization {
        quantizers: Vec<QuantizerStats>,
        mixed_precision: Option<MixedPrecisionPlan>,
    },
    Binarization {
        epoch: usize,
        stage: u8,
        weights: bool,
        activations: bool,
        lr_factor: f64,
        layers: Vec<String>,
    },
    Sparsity(SparsityStats),
    FilterPruning(PruningStats),
}

/// Shape and values of a saved tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for SavedTensor {
    fn from(t: &Tensor) -> Self {
        SavedTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl SavedTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Everything a controller needs beyond the base weights to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ControllerState {
    Quantization {
        bits: Vec<u32>,
        params: Vec<Vec<SavedTensor>>,
        plan: Option<MixedPrecisionPlan>,
    },
    Binarization {
        epoch: usize,
        params: Vec<SavedTensor>,
    },
    Sparsity {
        scheduler: SparsityScheduler,
        masks: Vec<SavedTensor>,
        scores: Vec<SavedTensor>,
    },
    FilterPruning {
        epoch: usize,
        rate: f64,
        frozen: bool,
        masks: BTreeMap<String, Vec<bool>>,
    },
}

fn write_param(p: &Param, s: &SavedTensor) -> Result<()> {
    let mut t = p.write();
    if t.shape() != s.shape.as_slice() || s.data.len() != t.len() {
        return Err(Error::Format(format!(
            "saved tensor {:?} does not fit {:?}",
            s.shape,
            t.shape()
        )));
    }
    t.data_mut().copy_from_slice(&s.data);
    Ok(())
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Quantization(_) => "quantization",
            Controller::Binarization(_) => "binarization",
            Controller::Sparsity(s) => match s.method {
                SparsityMethod::Magnitude => "magnitude_sparsity",
                SparsityMethod::Rb => "rb_sparsity",
            },
            Controller::Pruning(_) => "filter_pruning",
        }
    }

    /// Auxiliary loss term; only gate-based sparsity defines one.
    pub fn loss(&self, ctx: &mut ForwardContext<'_>) -> Result<Option<Var>> {
        match self {
            Controller::Sparsity(s) => s.loss(ctx),
            _ => Ok(None),
        }
    }

    /// Per-batch schedule step. No current algorithm changes per batch.
    pub fn step(&mut self) {}

    /// Per-epoch schedule step; `metric` is the monitored validation loss.
    pub fn epoch_step(&mut self, metric: Option<f64>) -> Result<()> {
        match self {
            Controller::Quantization(_) => Ok(()),
            Controller::Binarization(b) => b.set_epoch(b.epoch + 1),
            Controller::Sparsity(s) => s.epoch_step(metric),
            Controller::Pruning(p) => p.epoch_step(),
        }
    }

    pub fn after_backward(&self) {
        if let Controller::Pruning(p) = self {
            p.after_backward();
        }
    }

    pub fn after_step(&self) {
        if let Controller::Pruning(p) = self {
            p.after_step();
        }
    }

    /// Trainable tensors owned by the algorithm.
    pub fn params(&self) -> Vec<Param> {
        match self {
            Controller::Quantization(q) => q.quantizers.iter().flat_map(|h| h.params()).collect(),
            Controller::Binarization(b) => b.layers.params(),
            Controller::Sparsity(s) => s.params(),
            Controller::Pruning(_) => Vec::new(),
        }
    }

    /// Optimizer groups for [`Controller::params`], none weight-decayed.
    /// Quantizer parameters take the step-size gradient scale
    /// `1/sqrt(n * q_max)`, `n` being the elements one range covers.
    pub fn param_groups(&self, graph: &ModelGraph) -> Result<Vec<ParamGroup>> {
        let Controller::Quantization(q) = self else {
            let lr_scale = match self {
                Controller::Sparsity(s) => s.score_lr_scale,
                _ => 1.0,
            };
            return Ok(vec![ParamGroup {
                params: self.params(),
                lr_scale,
                weight_decay: false,
            }]);
        };
        let mut groups = Vec::with_capacity(q.quantizers.len());
        for h in &q.quantizers {
            let spec = h.spec();
            let n = match &h.point.position {
                HookPosition::PreParam(name) => {
                    let shape = graph
                        .node(&h.point.node)?
                        .param(name)
                        .expect("hooked parameter")
                        .read()
                        .shape()
                        .to_vec();
                    let n: usize = shape.iter().product();
                    if spec.per_channel {
                        n / shape[0]
                    } else {
                        n
                    }
                }
                _ if h.point.node == INPUT => graph.input_shape().iter().product(),
                _ => graph.node(&h.point.node)?.out_shape().iter().product(),
            };
            let q_max = spec.levels()?.1 as f64;
            groups.push(ParamGroup {
                params: h.params(),
                lr_scale: 1.0 / (n.max(1) as f64 * q_max).sqrt(),
                weight_decay: false,
            });
        }
        Ok(groups)
    }

    pub fn lr_factor(&self) -> f64 {
        match self {
            Controller::Binarization(b) => b.stage.lr_factor,
            _ => 1.0,
        }
    }

    pub fn weight_decay(&self) -> bool {
        match self {
            Controller::Binarization(b) => b.stage.weight_decay,
            _ => true,
        }
    }

    pub fn statistics(&self) -> ControllerStats {
        match self {
            Controller::Quantization(q) => ControllerStats::Quantization {
                quantizers: q.quantizers.iter().map(|h| quantizer_stats(h)).collect(),
                mixed_precision: q.plan.clone(),
            },
            Controller::Binarization(b) => ControllerStats::Binarization {
                epoch: b.epoch,
                stage: b.stage.stage,
                weights: b.stage.weights,
                activations: b.stage.activations,
                lr_factor: b.stage.lr_factor,
                layers: b.layers.layers.clone(),
            },
            Controller::Sparsity(s) => ControllerStats::Sparsity(s.statistics()),
            Controller::Pruning(p) => ControllerStats::FilterPruning(p.statistics()),
        }
    }

    pub fn state(&self) -> ControllerState {
        match self {
            Controller::Quantization(q) => ControllerState::Quantization {
                bits: q.quantizers.iter().map(|h| h.spec().bits).collect(),
                params: q
                    .quantizers
                    .iter()
                    .map(|h| h.params().iter().map(|p| SavedTensor::from(&*p.read())).collect())
                    .collect(),
                plan: q.plan.clone(),
            },
            Controller::Binarization(b) => ControllerState::Binarization {
                epoch: b.epoch,
                params: b
                    .layers
                    .params()
                    .iter()
                    .map(|p| SavedTensor::from(&*p.read()))
                    .collect(),
            },
            Controller::Sparsity(s) => ControllerState::Sparsity {
                scheduler: s.scheduler.clone(),
                masks: s.masks().iter().map(SavedTensor::from).collect(),
                scores: s.params().iter().map(|p| SavedTensor::from(&*p.read())).collect(),
            },
            Controller::Pruning(p) => ControllerState::FilterPruning {
                epoch: p.epoch,
                rate: p.rate,
                frozen: p.frozen,
                masks: p.masks(),
            },
        }
    }

    pub fn load_state(&mut self, state: &ControllerState) -> Result<()> {
        let mismatch = || Error::Format("saved controller state does not match the config".into());
        match (self, state) {
            (Controller::Quantization(q), ControllerState::Quantization { bits, params, plan }) => {
                if bits.len() != q.quantizers.len() || params.len() != q.quantizers.len() {
                    return Err(mismatch());
                }
                for ((h, &b), saved) in q.quantizers.iter().zip(bits).zip(params) {
                    h.set_bits(b)?;
                    let ps = h.params();
                    if ps.len() != saved.len() {
                        return Err(mismatch());
                    }
                    for (p, s) in ps.iter().zip(saved) {
                        write_param(p, s)?;
                    }
                }
                q.plan = plan.clone();
            }
            (Controller::Binarization(b), ControllerState::Binarization { epoch, params }) => {
                let ps = b.layers.params();
                if ps.len() != params.len() {
                    return Err(mismatch());
                }
                for (p, s) in ps.iter().zip(params) {
                    write_param(p, s)?;
                }
                b.set_epoch(*epoch)?;
            }
            (
                Controller::Sparsity(s),
                ControllerState::Sparsity {
                    scheduler,
                    masks,
                    scores,
                },
            ) => {
                let masks = masks.iter().map(|m| m.to_tensor()).collect::<Result<Vec<_>>>()?;
                let scores = scores.iter().map(|m| m.to_tensor()).collect::<Result<Vec<_>>>()?;
                s.restore(scheduler.clone(), &masks, &scores)?;
            }
            (
                Controller::Pruning(p),
                ControllerState::FilterPruning {
                    epoch,
                    rate,
                    frozen,
                    masks,
                },
            ) => {
                p.set_masks(masks)?;
                p.epoch = *epoch;
                p.rate = *rate;
                p.frozen = *frozen;
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

fn quantizer_stats(h: &QuantizerHandle) -> QuantizerStats {
    let spec = h.spec();
    let (scale, low, high, zero_points) = match h.range() {
        RangeParams::Symmetric { .. } => {
            let s = h.effective_scales().expect("symmetric");
            let n = s.len();
            (Some(s), None, None, vec![0; n])
        }
        RangeParams::Asymmetric { .. } => {
            let r = h.tuned_ranges().expect("asymmetric");
            (
                None,
                Some(r.iter().map(|r| r.low).collect()),
                Some(r.iter().map(|r| r.high).collect()),
                r.iter().map(|r| r.zero_point).collect(),
            )
        }
    };
    QuantizerStats {
        point: h.point.to_string(),
        kind: h.kind,
        mode: spec.mode,
        bits: spec.bits,
        role: spec.role,
        scale,
        low,
        high,
        zero_points,
    }
}

/// Sum of every controller's auxiliary loss, `None` when none defines one.
pub fn total_compression_loss(controllers: &[Controller], ctx: &mut ForwardContext<'_>) -> Result<Option<Var>> {
    let mut total = None;
    for c in controllers {
        if let Some(l) = c.loss(ctx)? {
            total = Some(match total {
                None => l,
                Some(t) => ctx.tape.add(t, l)?,
            });
        }
    }
    Ok(total)
}

/// A graph with compression hooks and the controllers that own them.
#[derive(Debug)]
pub struct CompressedModel {
    pub graph: ModelGraph,
    pub controllers: Vec<Controller>,
    pub config: CompressionConfig,
}

/// Labelled batches used for data-dependent initialization.
pub type InitData<'a> = &'a [(Tensor, Vec<usize>)];

/// Applies the configured algorithms in order. With `init` the
/// data-dependent initialization runs (quantizer ranges, binarizer scales,
/// bit-width selection); without it the caller is expected to load saved
/// controller state.
pub fn create_compressed_model(
    mut graph: ModelGraph,
    config: &CompressionConfig,
    init: Option<InitData<'_>>,
) -> Result<CompressedModel> {
    config.validate()?;
    if let Some(s) = &config.input_shape {
        if s.as_slice() != graph.input_shape() {
            return Err(config_err(
                "input_shape",
                format!("model takes {:?}, config declares {s:?}", graph.input_shape()),
            ));
        }
    }
    if let Some(data) = init {
        for (x, y) in data {
            if &x.shape()[1..] != graph.input_shape() || x.shape()[0] != y.len() {
                return Err(shape_err(
                    "create_compressed_model",
                    format!(
                        "init batch {:?} with {} labels for input {:?}",
                        x.shape(),
                        y.len(),
                        graph.input_shape()
                    ),
                ));
            }
        }
    }
    let batches: Vec<Tensor> = init
        .map(|d| d.iter().take(config.init.num_batches).map(|(x, _)| x.clone()).collect())
        .unwrap_or_default();
    let mut controllers = Vec::new();
    for alg in &config.algorithms {
        let c = match alg {
            AlgorithmConfig::Quantization(q) => {
                let policy = InsertionPolicy {
                    mode: q.mode,
                    bits: q.bits,
                    per_channel: q.per_channel,
                    quantize_input: q.quantize_input,
                    scale_gradient: q.scale_gradient,
                };
                let quantizers = insert_quantizers(&mut graph, &policy)?;
                let mut plan = None;
                if let Some(data) = init {
                    initialize_quantizer_ranges(&graph, &quantizers, &batches, batches.len())?;
                    if let Some(mp) = &q.mixed_precision {
                        let (x, y) = data.first().ok_or_else(|| {
                            Error::InvalidArgument("mixed precision needs a calibration batch".into())
                        })?;
                        let p = plan_bitwidths(&graph, &quantizers, mp, x, y, mp.seed.unwrap_or(config.seed))?;
                        apply_plan(&graph, &quantizers, &p)?;
                        plan = Some(p);
                    }
                }
                Controller::Quantization(QuantizationController { quantizers, plan })
            }
            AlgorithmConfig::Binarization(b) => {
                let layers = apply_binarization(&mut graph, b)?;
                if init.is_some() {
                    for batch in &batches {
                        let mut ctx = ForwardContext::new(Mode::Calibrate);
                        let x = ctx.tape.constant(batch.clone());
                        graph.forward(&mut ctx, x)?;
                    }
                    for a in &layers.activations {
                        a.finish_calibration();
                    }
                }
                let mut c = BinarizationController {
                    layers,
                    stage_epochs: b.stage_epochs,
                    epoch: 0,
                    stage: binarization_stage_at(0, b.stage_epochs)?,
                };
                c.set_epoch(0)?;
                Controller::Binarization(c)
            }
            AlgorithmConfig::MagnitudeSparsity(s) => {
                Controller::Sparsity(apply_sparsity(&mut graph, SparsityMethod::Magnitude, s)?)
            }
            AlgorithmConfig::RbSparsity(s) => Controller::Sparsity(apply_sparsity(&mut graph, SparsityMethod::Rb, s)?),
            AlgorithmConfig::FilterPruning(p) => Controller::Pruning(apply_filter_pruning(&mut graph, p)?),
        };
        controllers.push(c);
    }
    Ok(CompressedModel {
        graph,
        controllers,
        config: config.clone(),
    })
}

/// Hessian traces on a hook-free copy, then the best monotone assignment.
fn plan_bitwidths(
    graph: &ModelGraph,
    quantizers: &[Arc<QuantizerHandle>],
    mp: &MixedPrecisionConfig,
    x: &Tensor,
    y: &[usize],
    seed: u64,
) -> Result<MixedPrecisionPlan> {
    let weights: Vec<&Arc<QuantizerHandle>> = quantizers.iter().filter(|q| q.kind == QuantizerKind::Weight).collect();
    let layers: Vec<String> = weights.iter().map(|q| q.point.node.clone()).collect();
    let plain = graph.detached_copy();
    let traces = layer_average_traces(&plain, x, y, &layers, mp.trace_samples, seed)?;
    let mut candidates = Vec::with_capacity(layers.len());
    for ((id, trace), q) in layers.iter().zip(&traces).zip(&weights) {
        let w = graph.node(id)?.param("weight").expect("weighted layer").snapshot();
        candidates.push(LayerCandidate::from_weight(
            id,
            *trace,
            graph.layer_flops(id)? as f64,
            &w,
            &q.spec(),
            &mp.candidate_bits,
        )?);
    }
    select_bitwidth_config(&candidates, &mp.candidate_bits, mp.ratio_threshold, mp.rule)
}

/// Weight quantizers take the planned bits; each activation quantizer takes
/// the largest bit-width among the weighted layers it feeds.
fn apply_plan(graph: &ModelGraph, quantizers: &[Arc<QuantizerHandle>], plan: &MixedPrecisionPlan) -> Result<()> {
    let bits: HashMap<&str, u32> = plan
        .layers
        .iter()
        .map(String::as_str)
        .zip(plan.bits.iter().copied())
        .collect();
    for q in quantizers {
        match q.kind {
            QuantizerKind::Weight => q.set_bits(bits[q.point.node.as_str()])?,
            QuantizerKind::Activation => {
                let fed = downstream_weighted(graph, &q.point.node);
                if let Some(b) = fed.iter().filter_map(|l| bits.get(l.as_str())).max() {
                    q.set_bits(*b)?;
                }
            }
        }
    }
    Ok(())
}

fn downstream_weighted(graph: &ModelGraph, id: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![id.to_string()];
    let mut seen = HashSet::new();
    while let Some(cur) = stack.pop() {
        for n in graph.consumers(&cur) {
            if !seen.insert(n.id.clone()) {
                continue;
            }
            match n.kind {
                LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => out.push(n.id.clone()),
                _ => stack.push(n.id.clone()),
            }
        }
    }
    out
}

impl CompressedModel {
    pub fn compression_loss(&self, ctx: &mut ForwardContext<'_>) -> Result<Option<Var>> {
        total_compression_loss(&self.controllers, ctx)
    }

    /// Model weights plus every controller's trainable tensors.
    pub fn trainable_params(&self) -> Vec<Param> {
        let mut p = self.graph.trainable_params();
        for c in &self.controllers {
            p.extend(c.params());
        }
        p
    }

    /// Model weights (decayed unless a controller says otherwise) followed
    /// by each controller's groups.
    pub fn param_groups(&self) -> Result<Vec<ParamGroup>> {
        let mut groups = vec![ParamGroup {
            params: self.graph.trainable_params(),
            lr_scale: 1.0,
            weight_decay: self.weight_decay(),
        }];
        for c in &self.controllers {
            groups.extend(c.param_groups(&self.graph)?);
        }
        Ok(groups)
    }

    pub fn step(&mut self) {
        for c in &mut self.controllers {
            c.step();
        }
    }

    pub fn epoch_step(&mut self, metric: Option<f64>) -> Result<()> {
        for c in &mut self.controllers {
            c.epoch_step(metric)?;
        }
        Ok(())
    }

    pub fn after_backward(&self) {
        for c in &self.controllers {
            c.after_backward();
        }
    }

    pub fn after_step(&self) {
        for c in &self.controllers {
            c.after_step();
        }
    }

    pub fn lr_factor(&self) -> f64 {
        self.controllers.iter().map(Controller::lr_factor).product()
    }

    pub fn weight_decay(&self) -> bool {
        self.controllers.iter().all(Controller::weight_decay)
    }

    pub fn statistics(&self) -> Vec<ControllerStats> {
        self.controllers.iter().map(Controller::statistics).collect()
    }

    pub fn state(&self) -> Vec<ControllerState> {
        self.controllers.iter().map(Controller::state).collect()
    }

    pub fn load_state(&mut self, state: &[ControllerState]) -> Result<()> {
        if state.len() != self.controllers.len() {
            return Err(Error::Format(format!(
                "saved state has {} controllers, config builds {}",
                state.len(),
                self.controllers.len()
            )));
        }
        for (c, s) in self.controllers.iter_mut().zip(state) {
            c.load_state(s)?;
        }
        Ok(())
    }

    /// Reserved for multi-process training; a no-op here.
    pub fn distributed(&self) {}

    /// A hook-free graph computing the same eval-mode function: masks
    /// baked into weights, quantizers and binarizers as explicit nodes,
    /// pruned filters removed.
    pub fn export(&self) -> Result<ModelGraph> {
        let mut g = self.graph.detached_copy();
        let mut tails: HashMap<String, String> = HashMap::new();
        let mut param_nodes: HashSet<String> = HashSet::new();
        for hook in self.graph.hooks() {
            let point = &hook.point;
            let family = hook.transform.family();
            match hook.transform.export(point)? {
                ExportAction::Skip => {}
                ExportAction::BakeMask(mask) => {
                    let HookPosition::PreParam(name) = &point.position else {
                        return Err(Error::Graph(format!("mask hook at {point} is not on a parameter")));
                    };
                    let key = format!("{}.{name}", point.node);
                    if param_nodes.contains(&key) {
                        return Err(Error::Graph(format!(
                            "{family} mask at {point} follows a parameter transform and cannot be baked"
                        )));
                    }
                    let w = g.node(&point.node)?.param(name).expect("hooked parameter").snapshot();
                    let baked = w.zip_map(&mask, |a, m| a * m)?.with_requires_grad(w.requires_grad);
                    g.replace_param(&point.node, name, baked)?;
                }
                ExportAction::Node { kind, params } => {
                    let id = unique_id(&g, &format!("{}/{family}", hook_label(point)));
                    let params = params.into_iter().map(|(k, v)| (k, Param::new(v))).collect();
                    match &point.position {
                        HookPosition::PreParam(name) => {
                            if kind.param_target().is_none() {
                                return Err(Error::Graph(format!("export of {point} lacks a parameter target")));
                            }
                            if !matches!(kind, LayerKind::FakeQuantize { .. }) {
                                param_nodes.insert(format!("{}.{name}", point.node));
                            }
                            g.push_param_node(Node {
                                id,
                                kind,
                                inputs: vec![],
                                params,
                                out_shape: vec![],
                            })?;
                        }
                        HookPosition::PostOutput => {
                            let tail = tails.get(&point.node).cloned().unwrap_or_else(|| point.node.clone());
                            let node = Node {
                                id: id.clone(),
                                kind,
                                inputs: vec![tail.clone()],
                                params,
                                out_shape: vec![],
                            };
                            g.splice_after(&tail, node, &tail, None)?;
                            tails.insert(point.node.clone(), id);
                        }
                        HookPosition::PreInput(i) => {
                            let source = g.node(&point.node)?.inputs[*i].clone();
                            let node = Node {
                                id,
                                kind,
                                inputs: vec![source.clone()],
                                params,
                                out_shape: vec![],
                            };
                            let only: HashSet<String> = [point.node.clone()].into();
                            g.splice_after(&source, node, &source, Some(&only))?;
                        }
                    }
                }
            }
        }
        for c in &self.controllers {
            if let Controller::Pruning(p) = c {
                g = crate::pruning::strip_pruned_filters(&g, &p.masks())?;
            }
        }
        Ok(g)
    }

    pub fn export_model(&self, path: &Path) -> Result<()> {
        save_model(&self.export()?, path)
    }
}

fn hook_label(point: &HookPoint) -> String {
    match &point.position {
        HookPosition::PreParam(p) => format!("{}.{p}", point.node),
        HookPosition::PreInput(i) => format!("{}.in{i}", point.node),
        HookPosition::PostOutput => format!("{}.out", point.node),
    }
}

fn unique_id(g: &ModelGraph, base: &str) -> String {
    if base != INPUT && g.node_index(base).is_none() {
        return base.to_string();
    }
    (1..)
        .map(|i| format!("{base}#{i}"))
        .find(|c| g.node_index(c).is_none())
        .expect("unbounded")
}

const BASE_FILE: &str = "base.sqzm";
const CONFIG_FILE: &str = "compression.json";
const STATE_FILE: &str = "state.json";

/// Writes a checkpoint directory: the raw (unhooked) model, the config and
/// the controller state.
pub fn save_checkpoint(model: &CompressedModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(&model.graph.detached_copy(), &dir.join(BASE_FILE))?;
    fs::write(dir.join(CONFIG_FILE), model.config.to_json())?;
    fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&model.state())?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<CompressedModel> {
    let base = load_model(&dir.join(BASE_FILE))?;
    let config = CompressionConfig::from_file(&dir.join(CONFIG_FILE))?;
    let state: Vec<ControllerState> = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
    let mut model = create_compressed_model(base, &config, None)?;
    model.load_state(&state)?;
    Ok(model)
}
