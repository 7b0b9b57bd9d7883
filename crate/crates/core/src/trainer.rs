//! End-to-end fine-tuning: data, model preset, compression wrapping, the
//! epoch loop and per-epoch metric records.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{create_compressed_model, CompressedModel, CompressionConfig, ControllerStats};
use crate::error::{Error, Result};
use crate::graph::{ForwardContext, Mode};
use crate::train::{
    argmax_rows, bar_patterns, cross_entropy, evaluate, gaussian_blobs, load_csv, zero_grads, Dataset, Preset, Sgd,
};

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Two Gaussian blobs in the plane.
    Blobs {
        samples: usize,
    },
    /// 8×8 single-channel images of horizontal or vertical bars.
    Bars {
        samples: usize,
    },
    Csv {
        path: PathBuf,
        label: Option<String>,
    },
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Blobs { samples } => gaussian_blobs(*samples, seed),
            DataSource::Bars { samples } => bar_patterns(*samples, seed),
            DataSource::Csv { path, label } => load_csv(path, label.as_deref()),
        }
    }
}

/// `blobs`, `bars`, `blobs:N`, `bars:N`, or a CSV path optionally followed
/// by `#column` naming the label column.
impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, count) = match s.split_once(':') {
            Some((n, c)) if n == "blobs" || n == "bars" => {
                let c = c
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad sample count in `{s}`")))?;
                (n, Some(c))
            }
            _ => (s, None),
        };
        Ok(match name {
            "blobs" => DataSource::Blobs {
                samples: count.unwrap_or(400),
            },
            "bars" => DataSource::Bars {
                samples: count.unwrap_or(600),
            },
            _ => {
                let (path, label) = match s.rsplit_once('#') {
                    Some((p, l)) => (p, Some(l.to_string())),
                    None => (s, None),
                };
                DataSource::Csv {
                    path: PathBuf::from(path),
                    label,
                }
            }
        })
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Blobs { samples } => write!(f, "blobs:{samples}"),
            DataSource::Bars { samples } => write!(f, "bars:{samples}"),
            DataSource::Csv { path, label: Some(l) } => write!(f, "{}#{l}", path.display()),
            DataSource::Csv { path, label: None } => write!(f, "{}", path.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub dataset: DataSource,
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of samples used for training; the rest validate.
    pub train_fraction: f64,
}

impl TrainSpec {
    pub fn new(dataset: DataSource, preset: Preset) -> Self {
        TrainSpec {
            dataset,
            preset,
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "momentum must lie in [0, 1) and weight decay be non-negative".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Loads and splits the data deterministically.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let data = self.dataset.load(self.seed)?;
        if data.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} class(es), need at least 2",
                data.classes
            )));
        }
        let (train, val) = data.split(self.train_fraction, self.seed)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} samples are too few to split",
                data.len()
            )));
        }
        Ok((train, val))
    }
}

/// Metrics of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy.
    pub task_loss: f64,
    /// Mean auxiliary compression loss.
    pub compression_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr_factor: f64,
    pub stats: Vec<ControllerStats>,
}

/// Fine-tunes `model` for `spec.epochs` epochs. Per batch: forward, task
/// plus compression loss, backward, SGD step, controller hooks; per epoch:
/// validation and a scheduler step on the validation loss.
pub fn fit(
    model: &mut CompressedModel,
    train: &Dataset,
    val: &Dataset,
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    spec.validate()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(3));
    let mut sgd = Sgd::new(spec.lr, spec.momentum, spec.weight_decay);
    let mut records = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let params = model.trainable_params();
        let groups = model.param_groups()?;
        let lr_factor = model.lr_factor();
        let (mut task_sum, mut comp_sum, mut correct) = (0.0, 0.0, 0usize);
        for (x, y) in train.shuffled_batches(spec.batch_size, &mut shuffle_rng)? {
            zero_grads(&params);
            let mut ctx = ForwardContext::new(Mode::Train).with_rng(&mut noise_rng);
            let xv = ctx.tape.constant(x);
            let logits = model.graph.forward(&mut ctx, xv)?;
            let task = cross_entropy(&mut ctx.tape, logits, &y)?;
            let comp = model.compression_loss(&mut ctx)?;
            let loss = match comp {
                Some(c) => ctx.tape.add(task, c)?,
                None => task,
            };
            let loss_value = ctx.tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss_value} in epoch {epoch}")));
            }
            let n = y.len() as f64;
            task_sum += ctx.tape.value(task).item() * n;
            comp_sum += comp.map_or(0.0, |c| ctx.tape.value(c).item()) * n;
            correct += argmax_rows(ctx.tape.value(logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            ctx.backward(loss)?;
            drop(ctx);
            model.after_backward();
            sgd.step_groups(&groups, lr_factor);
            model.after_step();
            model.step();
        }
        let report = evaluate(&model.graph, val, spec.batch_size)?;
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss became {} in epoch {epoch}",
                report.loss
            )));
        }
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            task_loss: task_sum / n,
            compression_loss: comp_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss: report.loss,
            val_accuracy: report.accuracy,
            lr_factor,
            stats: model.statistics(),
        };
        on_epoch(&record);
        records.push(record);
        model.epoch_step(Some(report.loss))?;
    }
    Ok(records)
}

/// Result of [`run_training`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CompressedModel,
    pub records: Vec<EpochRecord>,
    pub train: Dataset,
    pub val: Dataset,
}

/// Builds the preset, wraps it with `config` (initialized on training
/// batches) and fits it.
pub fn run_training(
    spec: &TrainSpec,
    config: &CompressionConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    config.validate()?;
    let (train, val) = spec.datasets()?;
    let graph = spec
        .preset
        .build(train.sample_shape(), train.classes, spec.seed.wrapping_add(1))?;
    let init = train.batches(spec.batch_size)?;
    let mut model = create_compressed_model(graph, config, Some(&init))?;
    let records = fit(&mut model, &train, &val, spec, on_epoch)?;
    Ok(TrainOutcome {
        model,
        records,
        train,
        val,
    })
}
