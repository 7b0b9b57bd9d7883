//! Unstructured weight sparsity: global magnitude thresholding on a
//! schedule, and trainable stochastic gates with a density penalty.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{
    compile_patterns, ExportAction, Family, ForwardContext, HookPoint, HookTransform, LayerKind, Mode, ModelGraph,
    Param,
};
use crate::tensor::Tensor;

/// Per-layer importances `|w| / ‖W‖₂`. A zero layer has zero importance.
pub fn normalized_importance(w: &Tensor) -> Vec<f64> {
    let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; w.len()];
    }
    w.data().iter().map(|v| v.abs() / norm).collect()
}

/// Masks that zero the `round(level · N)` least important weights across all
/// layers together, `N` being the total weight count. Ties zero the earlier
/// weight (layers in order, then flat index).
pub fn magnitude_masks(weights: &[&Tensor], level: f64) -> Result<Vec<Tensor>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!("sparsity level {level} outside [0, 1)")));
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (l, w) in weights.iter().enumerate() {
        all.extend(normalized_importance(w).into_iter().enumerate().map(|(i, v)| (v, l, i)));
    }
    let k = (level * all.len() as f64).round() as usize;
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut masks: Vec<Tensor> = weights.iter().map(|w| Tensor::ones(w.shape())).collect();
    for &(_, l, i) in &all[..k] {
        masks[l].data_mut()[i] = 0.0;
    }
    Ok(masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Polynomial,
    Exponential,
    Multistep,
    Adaptive,
}

/// Sparsity level over epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySchedule {
    pub mode: ScheduleMode,
    #[serde(default)]
    pub init: f64,
    pub target: f64,
    /// Epoch at which the target is reached.
    pub epochs: usize,
    /// Polynomial exponent.
    #[serde(default = "default_power")]
    pub power: f64,
    /// Multistep `[epoch, level]` pairs.
    #[serde(default)]
    pub steps: Vec<(usize, f64)>,
    /// Adaptive: minimum improvement of the monitored loss that holds the
    /// level.
    #[serde(default = "default_patience")]
    pub patience: f64,
    /// Adaptive increment.
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_power() -> f64 {
    1.0
}

fn default_patience() -> f64 {
    1e-3
}

fn default_step() -> f64 {
    0.05
}

impl SparsitySchedule {
    /// A constant schedule at `level`.
    pub fn constant(level: f64) -> Self {
        SparsitySchedule {
            mode: ScheduleMode::Polynomial,
            init: level,
            target: level,
            epochs: 0,
            power: default_power(),
            steps: Vec::new(),
            patience: default_patience(),
            step: default_step(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.target) {
            return bad(format!("target sparsity {} outside [0, 1)", self.target));
        }
        if !(0.0..=self.target).contains(&self.init) {
            return bad(format!("initial sparsity {} outside [0, target]", self.init));
        }
        if self.epochs == 0 && self.init != self.target {
            return bad("a schedule spanning 0 epochs needs init == target".into());
        }
        match self.mode {
            ScheduleMode::Polynomial if !(self.power > 0.0) => bad(format!("power {} must be positive", self.power)),
            ScheduleMode::Adaptive if !(self.step > 0.0) || !(self.patience >= 0.0) => {
                bad("adaptive step must be positive and patience non-negative".into())
            }
            ScheduleMode::Multistep => {
                let mut prev: Option<(usize, f64)> = None;
                for &(e, l) in &self.steps {
                    if !(0.0..=self.target).contains(&l) {
                        return bad(format!("multistep level {l} outside [0, target]"));
                    }
                    if let Some((pe, pl)) = prev {
                        if e <= pe || l < pl {
                            return bad("multistep epochs must increase and levels must not decrease".into());
                        }
                    }
                    prev = Some((e, l));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Scheduled level at `epoch`. For the adaptive mode this is the level
/// before any feedback: `init` until the span ends.
pub fn sparsity_level_at_epoch(spec: &SparsitySchedule, epoch: usize) -> Result<f64> {
    spec.validate()?;
    if epoch >= spec.epochs {
        return Ok(spec.target);
    }
    let frac = epoch as f64 / spec.epochs as f64;
    let level = match spec.mode {
        ScheduleMode::Polynomial => spec.init + (spec.target - spec.init) * frac.powf(spec.power),
        ScheduleMode::Exponential => spec.target - (spec.target - spec.init) * (-5.0 * frac).exp(),
        ScheduleMode::Multistep => spec
            .steps
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map_or(spec.init, |&(_, l)| l),
        ScheduleMode::Adaptive => spec.init,
    };
    Ok(level.min(spec.target))
}

/// Epoch counter plus adaptive feedback state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityScheduler {
    pub spec: SparsitySchedule,
    pub epoch: usize,
    pub level: f64,
    best: Option<f64>,
}

impl SparsityScheduler {
    pub fn new(spec: SparsitySchedule) -> Result<Self> {
        let level = sparsity_level_at_epoch(&spec, 0)?;
        Ok(SparsityScheduler {
            spec,
            epoch: 0,
            level,
            best: None,
        })
    }

    /// Advances one epoch. `metric` is the monitored loss (lower is better)
    /// and only matters in adaptive mode.
    pub fn epoch_step(&mut self, metric: Option<f64>) -> f64 {
        self.epoch += 1;
        if self.spec.mode == ScheduleMode::Adaptive {
            if let Some(m) = metric {
                if let Some(b) = self.best {
                    if b - m < self.spec.patience {
                        self.level = (self.level + self.spec.step).min(self.spec.target);
                    }
                }
                self.best = Some(self.best.map_or(m, |b| b.min(m)));
            }
            if self.epoch >= self.spec.epochs {
                self.level = self.spec.target;
            }
        } else {
            self.level = sparsity_level_at_epoch(&self.spec, self.epoch).expect("validated at construction");
        }
        self.level
    }
}

/// `logit(u)` for `n` uniform draws; `u` is kept inside the open interval.
pub fn gate_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            (u / (1.0 - u)).ln()
        })
        .collect()
}

/// One Bernoulli(sigmoid(s)) gate per score: `[s + logit(u) > 0]`.
pub fn sample_gates(scores: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = gate_noise(scores.len(), rng);
    let data = scores
        .data()
        .iter()
        .zip(&noise)
        .map(|(s, n)| if s + n > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(scores.shape().to_vec(), data).expect("same length")
}

/// Deterministic test-time mask `[sigmoid(s) > 0.5]`, i.e. `[s > 0]`.
pub fn rb_eval_mask(scores: &Tensor) -> Tensor {
    scores.map(|s| if s > 0.0 { 1.0 } else { 0.0 })
}

/// `(Σ sigmoid(s) / |θ| − (1 − level))²` over all score tensors together.
pub fn rb_regularizer_loss(tape: &mut Tape, scores: &[Var], level: f64) -> Result<Var> {
    let total: usize = scores.iter().map(|s| tape.value(*s).len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("density loss over zero weights".into()));
    }
    let mut acc: Option<Var> = None;
    for &s in scores {
        let p = tape.sigmoid(s);
        let ps = tape.sum(p);
        acc = Some(match acc {
            None => ps,
            Some(a) => tape.add(a, ps)?,
        });
    }
    let mean = tape.scale(acc.expect("non-empty"), 1.0 / total as f64);
    let d = tape.add_scalar(mean, -(1.0 - level));
    Ok(tape.square(d))
}

/// Plain-number twin of [`rb_regularizer_loss`].
pub fn rb_loss_value(scores: &[&Tensor], level: f64) -> f64 {
    let total: usize = scores.iter().map(|s| s.len()).sum();
    let sum: f64 = scores.iter().flat_map(|s| s.data().iter()).map(|&s| sigmoid(s)).sum();
    let d = sum / total as f64 - (1.0 - level);
    d * d
}

/// Multiplies a parameter by a fixed binary mask.
#[derive(Debug)]
pub struct MaskHook {
    family: Family,
    mask: RwLock<Arc<Vec<f64>>>,
    shape: Vec<usize>,
}

impl MaskHook {
    pub fn new(family: Family, mask: Tensor) -> Self {
        MaskHook {
            family,
            shape: mask.shape().to_vec(),
            mask: RwLock::new(Arc::new(mask.into_data())),
        }
    }

    pub fn mask(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.mask.read().as_ref().clone()).expect("stored shape")
    }

    pub fn set_mask(&self, mask: Tensor) -> Result<()> {
        if mask.shape() != self.shape.as_slice() {
            return Err(Error::InvalidArgument(format!(
                "mask shape {:?} does not match {:?}",
                mask.shape(),
                self.shape
            )));
        }
        *self.mask.write() = Arc::new(mask.into_data());
        Ok(())
    }

    pub fn zeros(&self) -> usize {
        self.mask.read().iter().filter(|&&m| m == 0.0).count()
    }
}

impl HookTransform for MaskHook {
    fn family(&self) -> Family {
        self.family.clone()
    }

    fn apply(&self, ctx: &mut ForwardContext<'_>, _: &HookPoint, x: Var) -> Result<Var> {
        let m = self.mask.read().clone();
        ctx.tape.mul_const(x, m)
    }

    fn export(&self, _: &HookPoint) -> Result<ExportAction> {
        Ok(ExportAction::BakeMask(self.mask()))
    }
}

/// Stochastic gate per weight. Training samples `[s + logit(u) > 0]` and
/// passes gradients to the scores through `sigmoid(s + logit(u))`; other
/// modes use `[s > 0]`.
#[derive(Debug)]
pub struct RbGate {
    pub scores: Param,
}

impl HookTransform for RbGate {
    fn family(&self) -> Family {
        Family::Sparsity
    }

    fn apply(&self, ctx: &mut ForwardContext<'_>, _: &HookPoint, x: Var) -> Result<Var> {
        if ctx.mode() != Mode::Train {
            let m = rb_eval_mask(&self.scores.read());
            return ctx.tape.mul_const(x, Arc::new(m.into_data()));
        }
        let s = ctx.param(&self.scores);
        let shape = ctx.tape.shape(s).to_vec();
        let noise = gate_noise(ctx.tape.value(s).len(), ctx.rng()?);
        let n = ctx.tape.constant(Tensor::new(shape, noise)?);
        let a = ctx.tape.add(s, n)?;
        let p = ctx.tape.sigmoid(a);
        let z = ctx.tape.ste_apply(p, |v| if v > 0.5 { 1.0 } else { 0.0 });
        ctx.tape.mul(x, z)
    }

    fn export(&self, _: &HookPoint) -> Result<ExportAction> {
        Ok(ExportAction::BakeMask(rb_eval_mask(&self.scores.read())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMethod {
    Magnitude,
    Rb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub schedule: SparsitySchedule,
    /// Node-id regexes of conv / fully connected layers to leave dense.
    #[serde(default)]
    pub ignored: Vec<String>,
    /// Initial gate score (gate-based method only).
    #[serde(default = "default_init_score")]
    pub init_score: f64,
    /// Learning-rate multiplier for gate scores; `None` uses the number of
    /// gated weights, cancelling the `1/N` of the mean-density loss.
    #[serde(default)]
    pub score_lr_scale: Option<f64>,
}

fn default_init_score() -> f64 {
    3.0
}

#[derive(Clone, Debug)]
enum Gate {
    Magnitude(Arc<MaskHook>),
    Rb(Arc<RbGate>),
}

#[derive(Clone, Debug)]
pub struct SparseLayer {
    pub node: String,
    pub weight: Param,
    gate: Gate,
}

impl SparseLayer {
    /// The mask the layer applies at evaluation time.
    pub fn eval_mask(&self) -> Tensor {
        match &self.gate {
            Gate::Magnitude(h) => h.mask(),
            Gate::Rb(g) => rb_eval_mask(&g.scores.read()),
        }
    }

    pub fn scores(&self) -> Option<&Param> {
        match &self.gate {
            Gate::Rb(g) => Some(&g.scores),
            Gate::Magnitude(_) => None,
        }
    }
}

/// Per-layer zero counts of the evaluation masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub method: SparsityMethod,
    pub scheduled_level: f64,
    pub achieved_level: f64,
    /// Layer id to (zeros, total).
    pub layers: BTreeMap<String, (usize, usize)>,
}

/// State of one sparsity algorithm attached to a graph.
#[derive(Debug)]
pub struct SparsityAlgorithm {
    pub method: SparsityMethod,
    pub scheduler: SparsityScheduler,
    pub layers: Vec<SparseLayer>,
    /// Optimizer learning-rate multiplier for the gate scores.
    pub score_lr_scale: f64,
}

/// Conv and fully connected layers minus `ignored`.
pub fn sparsifiable_layers(graph: &ModelGraph, ignored: &[String]) -> Result<Vec<String>> {
    let deny = compile_patterns(ignored)?;
    let layers: Vec<String> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. }))
        .map(|n| n.id.clone())
        .collect();
    for (p, re) in ignored.iter().zip(&deny) {
        if !layers.iter().any(|l| re.is_match(l)) {
            log::warn!("sparsity ignore pattern `{p}` matches no layer");
        }
    }
    Ok(layers
        .into_iter()
        .filter(|l| !deny.iter().any(|r| r.is_match(l)))
        .collect())
}

/// Hooks a mask or gate onto every sparsifiable weight.
pub fn apply_sparsity(
    graph: &mut ModelGraph,
    method: SparsityMethod,
    config: &SparsityConfig,
) -> Result<SparsityAlgorithm> {
    let scheduler = SparsityScheduler::new(config.schedule.clone())?;
    let mut layers = Vec::new();
    for id in sparsifiable_layers(graph, &config.ignored)? {
        let weight = graph.node(&id)?.param("weight").expect("weighted layer").clone();
        let shape = weight.read().shape().to_vec();
        let point = HookPoint::pre_param(&id, "weight");
        let gate = match method {
            SparsityMethod::Magnitude => {
                let h = Arc::new(MaskHook::new(Family::Sparsity, Tensor::ones(&shape)));
                graph.insert_hook(point, h.clone())?;
                Gate::Magnitude(h)
            }
            SparsityMethod::Rb => {
                let scores = Param::new(Tensor::full(&shape, config.init_score).with_requires_grad(true));
                let g = Arc::new(RbGate { scores });
                graph.insert_hook(point, g.clone())?;
                Gate::Rb(g)
            }
        };
        layers.push(SparseLayer { node: id, weight, gate });
    }
    if layers.is_empty() {
        log::warn!("sparsity selected no layers");
    }
    let gated: usize = layers.iter().map(|l| l.weight.read().len()).sum();
    let alg = SparsityAlgorithm {
        method,
        scheduler,
        layers,
        score_lr_scale: config.score_lr_scale.unwrap_or(gated.max(1) as f64),
    };
    alg.refresh_masks()?;
    Ok(alg)
}

impl SparsityAlgorithm {
    /// Recomputes magnitude masks at the current level; gates need nothing.
    pub fn refresh_masks(&self) -> Result<()> {
        if self.method != SparsityMethod::Magnitude || self.layers.is_empty() {
            return Ok(());
        }
        let weights: Vec<Tensor> = self.layers.iter().map(|l| l.weight.snapshot()).collect();
        let refs: Vec<&Tensor> = weights.iter().collect();
        let masks = magnitude_masks(&refs, self.scheduler.level)?;
        for (l, m) in self.layers.iter().zip(masks) {
            if let Gate::Magnitude(h) = &l.gate {
                h.set_mask(m)?;
            }
        }
        Ok(())
    }

    pub fn set_level(&mut self, level: f64) -> Result<()> {
        if !(0.0..1.0).contains(&level) {
            return Err(Error::InvalidArgument(format!("sparsity level {level} outside [0, 1)")));
        }
        self.scheduler.level = level;
        self.refresh_masks()
    }

    pub fn epoch_step(&mut self, metric: Option<f64>) -> Result<()> {
        self.scheduler.epoch_step(metric);
        self.refresh_masks()
    }

    /// Density penalty for the gate method, bound to the scores already on
    /// `ctx`'s tape.
    pub fn loss(&self, ctx: &mut ForwardContext<'_>) -> Result<Option<Var>> {
        if self.method != SparsityMethod::Rb || self.layers.is_empty() {
            return Ok(None);
        }
        let vars: Vec<Var> = self
            .layers
            .iter()
            .filter_map(|l| l.scores())
            .map(|s| ctx.param(s))
            .collect();
        rb_regularizer_loss(&mut ctx.tape, &vars, self.scheduler.level).map(Some)
    }

    pub fn params(&self) -> Vec<Param> {
        self.layers.iter().filter_map(|l| l.scores().cloned()).collect()
    }

    /// Current magnitude masks, in layer order (empty for gates).
    pub fn masks(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .filter_map(|l| match &l.gate {
                Gate::Magnitude(h) => Some(h.mask()),
                Gate::Rb(_) => None,
            })
            .collect()
    }

    /// Restores saved scheduler state, magnitude masks and gate scores.
    pub fn restore(&mut self, scheduler: SparsityScheduler, masks: &[Tensor], scores: &[Tensor]) -> Result<()> {
        let (mut mi, mut si) = (masks.iter(), scores.iter());
        for l in &self.layers {
            match &l.gate {
                Gate::Magnitude(h) => {
                    let m = mi.next().ok_or_else(|| Error::Format("missing sparsity mask".into()))?;
                    h.set_mask(m.clone())?;
                }
                Gate::Rb(g) => {
                    let s = si.next().ok_or_else(|| Error::Format("missing gate scores".into()))?;
                    let mut p = g.scores.write();
                    if p.shape() != s.shape() {
                        return Err(Error::Format(format!(
                            "gate scores for `{}` have shape {:?}",
                            l.node,
                            s.shape()
                        )));
                    }
                    p.data_mut().copy_from_slice(s.data());
                }
            }
        }
        if mi.next().is_some() || si.next().is_some() {
            return Err(Error::Format(
                "saved sparsity state lists more layers than the model".into(),
            ));
        }
        self.scheduler = scheduler;
        Ok(())
    }

    pub fn statistics(&self) -> SparsityStats {
        let mut layers = BTreeMap::new();
        let (mut zeros, mut total) = (0, 0);
        for l in &self.layers {
            let m = l.eval_mask();
            let z = m.data().iter().filter(|&&v| v == 0.0).count();
            zeros += z;
            total += m.len();
            layers.insert(l.node.clone(), (z, m.len()));
        }
        SparsityStats {
            method: self.method,
            scheduled_level: self.scheduler.level,
            achieved_level: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
            layers,
        }
    }
}
