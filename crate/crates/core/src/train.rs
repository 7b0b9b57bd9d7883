//! Datasets, model presets, loss, optimizer and evaluation for desk-scale
//! training.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::graph::{ForwardContext, Mode, ModelGraph, Param, INPUT};
use crate::parallel::map_indices;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy of `[N, K]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "cross_entropy",
            format!("logits {s:?} for {} labels", labels.len()),
        ));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let maxes: Vec<f64> = tape
        .value(logits)
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = tape.constant(Tensor::new(vec![n, 1], maxes.iter().map(|m| -m).collect())?);
    let shifted = tape.add_broadcast(logits, shift)?;
    let e = tape.exp(shifted);
    let se = tape.sum_to(e, &[n, 1])?;
    let lse = tape.log(se);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = tape.gather(shifted, Arc::new(idx), &[n, 1])?;
    let d = tape.sub(lse, picked)?;
    Ok(tape.mean(d))
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument("a dataset needs at least two classes".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.select(0, idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Consecutive batches of at most `size` samples.
    pub fn batches(&self, size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batches_in_order(&idx, size)
    }

    /// Batches over a freshly shuffled order.
    pub fn shuffled_batches(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(Tensor, Vec<usize>)>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        self.batches_in_order(&idx, size)
    }

    fn batches_in_order(&self, idx: &[usize], size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        if size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        idx.chunks(size)
            .map(|c| Ok((self.inputs.select(0, c)?, c.iter().map(|&i| self.labels[i]).collect())))
            .collect()
    }

    /// Deterministic split: the first `train` fraction of a seeded shuffle
    /// for training, the rest for validation.
    pub fn split(&self, train: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train).round() as usize;
        Ok((self.subset(&idx[..cut])?, self.subset(&idx[cut..])?))
    }
}

/// Two Gaussian blobs in the plane, centred at `(-2, 0)` and `(2, 0)` with
/// standard deviation 0.7. Classes alternate.
pub fn gaussian_blobs(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.7).expect("valid deviation");
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let cx = if c == 0 { -2.0 } else { 2.0 };
        data.push(cx + noise.sample(&mut rng));
        data.push(noise.sample(&mut rng));
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// 8x8 single-channel images: class 0 holds a horizontal bar, class 1 a
/// vertical one, each two pixels wide at a random offset, with additive
/// Gaussian noise of deviation 0.3.
pub fn bar_patterns(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).expect("valid deviation");
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let pos = rng.gen_range(0..7);
        for r in 0..8 {
            for col in 0..8 {
                let on = if c == 0 {
                    r == pos || r == pos + 1
                } else {
                    col == pos || col == pos + 1
                };
                data.push(if on { 1.0 } else { 0.0 } + noise.sample(&mut rng));
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 1, 8, 8], data)?, labels, 2)
}

/// Numeric CSV with a header row; `label` names the integer class column
/// (the last column when `None`).
pub fn load_csv(path: &Path, label: Option<&str>) -> Result<Dataset> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .clone();
    let label_col = match label {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column `{name}` in {}", path.display())))?,
        None => headers
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidArgument("empty CSV header".into()))?,
    };
    let features = headers.len() - 1;
    if features == 0 {
        return Err(Error::InvalidArgument("CSV needs at least one feature column".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("row {}: {e}", row + 1)))?;
        for (j, field) in rec.iter().enumerate() {
            let parse_err =
                |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("row {}, column {j}: {e}", row + 1));
            if j == label_col {
                labels.push(field.trim().parse::<usize>().map_err(|e| parse_err(&e))?);
            } else {
                data.push(field.trim().parse::<f64>().map_err(|e| parse_err(&e))?);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no rows", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![labels.len(), features], data)?, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MlpSmall,
    CnnSmall,
    CnnResidual,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(Preset::MlpSmall),
            "cnn-small" => Ok(Preset::CnnSmall),
            "cnn-residual" => Ok(Preset::CnnResidual),
            other => Err(Error::InvalidArgument(format!(
                "unknown model `{other}` (expected mlp-small, cnn-small or cnn-residual)"
            ))),
        }
    }
}

impl Preset {
    pub fn build(self, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ModelGraph::new(input_shape.to_vec());
        match self {
            Preset::MlpSmall => {
                if input_shape.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "mlp-small needs flat inputs, got {input_shape:?}"
                    )));
                }
                g.fully_connected("fc1", INPUT, 16, &mut rng)?;
                g.relu("relu1", "fc1")?;
                g.fully_connected("fc2", "relu1", classes, &mut rng)?;
            }
            Preset::CnnSmall => {
                check_image(self, input_shape)?;
                g.conv2d("conv1", INPUT, 8, 3, 1, 1, true, &mut rng)?;
                g.batch_norm("bn1", "conv1")?;
                g.relu("relu1", "bn1")?;
                g.conv2d("conv2", "relu1", 16, 3, 1, 1, true, &mut rng)?;
                g.batch_norm("bn2", "conv2")?;
                g.relu("relu2", "bn2")?;
                g.max_pool2d("pool", "relu2", 2, 2)?;
                g.conv2d("conv3", "pool", 16, 3, 1, 1, true, &mut rng)?;
                g.relu("relu3", "conv3")?;
                g.flatten("flatten", "relu3")?;
                g.fully_connected("fc", "flatten", classes, &mut rng)?;
            }
            Preset::CnnResidual => {
                check_image(self, input_shape)?;
                g.conv2d("conv1", INPUT, 8, 3, 1, 1, true, &mut rng)?;
                g.batch_norm("bn1", "conv1")?;
                g.relu("relu1", "bn1")?;
                g.conv2d("conv2", "relu1", 8, 3, 1, 1, true, &mut rng)?;
                g.batch_norm("bn2", "conv2")?;
                g.relu("relu2", "bn2")?;
                g.conv2d("conv3", "relu2", 8, 3, 1, 1, true, &mut rng)?;
                g.batch_norm("bn3", "conv3")?;
                g.add("add", "bn3", "relu1")?;
                g.relu("relu3", "add")?;
                g.max_pool2d("pool", "relu3", 2, 2)?;
                g.flatten("flatten", "pool")?;
                g.fully_connected("fc", "flatten", classes, &mut rng)?;
            }
        }
        Ok(g)
    }
}

fn check_image(p: Preset, s: &[usize]) -> Result<()> {
    if s.len() != 3 || s[1] < 4 || s[2] < 4 {
        return Err(Error::InvalidArgument(format!(
            "{p:?} needs [C, H, W] inputs of at least 4x4, got {s:?}"
        )));
    }
    Ok(())
}

/// Stochastic gradient descent with optional momentum and decoupled L2
/// weight decay added to the gradient.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter that has a gradient, then clears it.
    pub fn step(&mut self, params: &[Param], lr_factor: f64, weight_decay: bool) {
        self.step_groups(
            &[ParamGroup {
                params: params.to_vec(),
                lr_scale: 1.0,
                weight_decay,
            }],
            lr_factor,
        );
    }

    /// Like [`Sgd::step`] with per-group learning-rate scales and decay flags.
    pub fn step_groups(&mut self, groups: &[ParamGroup], lr_factor: f64) {
        for group in groups {
            let lr = self.lr * lr_factor * group.lr_scale;
            let wd = if group.weight_decay { self.weight_decay } else { 0.0 };
            for p in &group.params {
                let mut t = p.write();
                let Some(g) = t.grad.take() else { continue };
                let vel = self.velocity.entry(p.key()).or_insert_with(|| vec![0.0; g.len()]);
                for ((w, gi), v) in t.data_mut().iter_mut().zip(&g).zip(vel.iter_mut()) {
                    let d = gi + wd * *w;
                    *v = self.momentum * *v + d;
                    *w -= lr * *v;
                }
            }
        }
    }
}

/// Parameters sharing a learning-rate scale and weight-decay setting.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub params: Vec<Param>,
    pub lr_scale: f64,
    pub weight_decay: bool,
}

pub fn zero_grads(params: &[Param]) {
    for p in params {
        p.write().zero_grad();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Eval-mode accuracy and mean loss; batches run in parallel and are reduced
/// in order.
pub fn evaluate(graph: &ModelGraph, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let batches = data.batches(batch_size)?;
    let parts = map_indices(batches.len(), |i| -> Result<(usize, f64)> {
        let (x, y) = &batches[i];
        let mut ctx = ForwardContext::new(Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let out = graph.forward(&mut ctx, xv)?;
        let loss = cross_entropy(&mut ctx.tape, out, y)?;
        let pred = argmax_rows(ctx.tape.value(out));
        let correct = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        Ok((correct, ctx.tape.value(loss).item() * y.len() as f64))
    });
    let (mut correct, mut loss) = (0, 0.0);
    for p in parts {
        let (c, l) = p?;
        correct += c;
        loss += l;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        loss: loss / n,
        samples: data.len(),
    })
}
