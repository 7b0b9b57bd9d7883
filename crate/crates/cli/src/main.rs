use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use squeeze::compression::{load_checkpoint, save_checkpoint, CompressionConfig, Controller, ControllerStats};
use squeeze::graph::{load_model, HookPosition, LayerKind};
use squeeze::parallel::{set_execution_mode, ExecutionMode};
use squeeze::quantization::QuantizerKind;
use squeeze::train::{evaluate, Preset};
use squeeze::trainer::{run_training, DataSource, TrainSpec};

#[derive(Parser, Debug)]
#[command(
    name = "squeeze",
    version,
    about = "Compression-aware training for small convnets and MLPs"
)]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a preset model under a compression config and save a checkpoint.
    Train {
        /// Compression config (JSON); omit for plain training.
        #[arg(long)]
        config: Option<PathBuf>,
        /// mlp-small, cnn-small or cnn-residual.
        #[arg(long)]
        model: Preset,
        /// blobs[:N], bars[:N] or a CSV path with an optional `#label` column.
        #[arg(long)]
        dataset: DataSource,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, env = "SQUEEZE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Output directory for the checkpoint and metrics log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the deployable model of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and throughput of an exported model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: DataSource,
        /// Seed for the synthetic generators.
        #[arg(long, env = "SQUEEZE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Per-layer bit widths, sparsity and pruning masks of a checkpoint.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

const CHECKPOINT_DIR: &str = "checkpoint";
const METRICS_FILE: &str = "metrics.jsonl";

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.sequential {
        set_execution_mode(ExecutionMode::Sequential);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures, 2 for everything else (usage, data, config, I/O).
fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<squeeze::Error>(), Some(squeeze::Error::Numeric(_))));
    if numeric {
        3
    } else {
        2
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            model,
            dataset,
            epochs,
            seed,
            batch_size,
            lr,
            out,
        } => {
            let mut spec = TrainSpec::new(dataset, model);
            spec.epochs = epochs;
            spec.seed = seed;
            spec.batch_size = batch_size;
            spec.lr = lr;
            train(&spec, config.as_deref(), &out)
        }
        Command::Export { checkpoint, out } => export(&checkpoint, &out),
        Command::Eval {
            model,
            dataset,
            seed,
            batch_size,
        } => eval(&model, &dataset, seed, batch_size),
        Command::Stats { checkpoint } => stats(&checkpoint),
    }
}

fn train(spec: &TrainSpec, config: Option<&Path>, out: &Path) -> Result<()> {
    let config = match config {
        Some(p) => CompressionConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))?,
        None => CompressionConfig::default(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(METRICS_FILE);
    let mut log_file =
        BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let outcome = run_training(spec, &config, |record| {
        let line = serde_json::to_string(record).expect("records serialize");
        println!("{line}");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing the metrics log");
    }
    log_file.flush()?;
    let dir = out.join(CHECKPOINT_DIR);
    save_checkpoint(&outcome.model, &dir).with_context(|| format!("saving checkpoint to {}", dir.display()))?;
    info!("checkpoint written to {}", dir.display());
    Ok(())
}

fn export(checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let exported = model.export()?;
    squeeze::graph::save_model(&exported, out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "exported {} ({} -> {} parameters)",
        out.display(),
        model.graph.parameter_count(),
        exported.parameter_count()
    );
    Ok(())
}

fn eval(model: &Path, dataset: &DataSource, seed: u64, batch_size: usize) -> Result<()> {
    let graph = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    let data = dataset
        .load(seed)
        .with_context(|| format!("loading dataset {dataset}"))?;
    if data.sample_shape() != graph.input_shape() {
        bail!(
            "dataset {dataset} has samples of shape {:?} but the model expects {:?}",
            data.sample_shape(),
            graph.input_shape()
        );
    }
    let classes = graph.output_shape().iter().product::<usize>();
    if data.classes > classes {
        bail!(
            "dataset {dataset} has {} classes but the model predicts {classes}",
            data.classes
        );
    }
    let start = Instant::now();
    let report = evaluate(&graph, &data, batch_size)?;
    let secs = start.elapsed().as_secs_f64();
    println!("accuracy {:.4} ({} samples)", report.accuracy, report.samples);
    println!("loss {:.6}", report.loss);
    println!("throughput {:.0} samples/s", report.samples as f64 / secs.max(1e-9));
    Ok(())
}

/// One row of the `stats` table.
#[derive(Default)]
struct LayerRow {
    kind: &'static str,
    params: usize,
    bits: Option<String>,
    sparsity: Option<(usize, usize)>,
    keep: Option<Vec<bool>>,
}

fn stats(checkpoint: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut rows: BTreeMap<String, LayerRow> = BTreeMap::new();
    let mut order = Vec::new();
    for node in model.graph.nodes() {
        let kind = match node.kind {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::FullyConnected { .. } => "fc",
            _ => continue,
        };
        let params = node
            .params
            .values()
            .map(|p| p.read())
            .filter(|t| t.requires_grad)
            .map(|t| t.len())
            .sum();
        order.push(node.id.clone());
        rows.insert(
            node.id.clone(),
            LayerRow {
                kind,
                params,
                ..Default::default()
            },
        );
    }

    let mut activation_bits = Vec::new();
    for stat in model.statistics() {
        match stat {
            ControllerStats::Quantization { .. } => {}
            ControllerStats::Binarization { layers, weights, .. } => {
                for l in layers {
                    if let Some(row) = rows.get_mut(&l) {
                        row.bits = Some(if weights { "1".into() } else { "1*".into() });
                    }
                }
            }
            ControllerStats::Sparsity(s) => {
                for (l, zt) in s.layers {
                    if let Some(row) = rows.get_mut(&l) {
                        row.sparsity = Some(zt);
                    }
                }
            }
            ControllerStats::FilterPruning(_) => {}
        }
    }
    for c in &model.controllers {
        match c {
            Controller::Quantization(q) => {
                for h in &q.quantizers {
                    let bits = h.spec().bits;
                    let weight =
                        h.kind == QuantizerKind::Weight && h.point.position == HookPosition::PreParam("weight".into());
                    match rows.get_mut(&h.point.node) {
                        Some(row) if weight => row.bits = Some(bits.to_string()),
                        _ => {
                            let at = match &h.point.position {
                                HookPosition::PreInput(i) => format!("{}[in {i}]", h.point.node),
                                HookPosition::PreParam(p) => format!("{}.{p}", h.point.node),
                                HookPosition::PostOutput => h.point.node.clone(),
                            };
                            activation_bits.push(format!("{at}={bits}"));
                        }
                    }
                }
            }
            Controller::Pruning(p) => {
                for l in &p.layers {
                    if let Some(row) = rows.get_mut(&l.node) {
                        row.keep = Some(l.keep.clone());
                    }
                }
            }
            _ => {}
        }
    }

    let algorithms: Vec<&str> = model.controllers.iter().map(|c| c.name()).collect();
    println!(
        "algorithms: {}",
        if algorithms.is_empty() {
            "none".to_string()
        } else {
            algorithms.join(", ")
        }
    );
    println!(
        "{:<12} {:<7} {:>7} {:>6} {:>16} {:>9}  keep mask",
        "layer", "kind", "params", "bits", "sparsity", "pruned"
    );
    for id in &order {
        let r = &rows[id];
        let sparsity = r.sparsity.map_or("-".to_string(), |(z, t)| {
            format!("{z}/{t} {:.1}%", 100.0 * z as f64 / t.max(1) as f64)
        });
        let (pruned, mask) = match &r.keep {
            Some(k) => (
                format!("{}/{}", k.iter().filter(|x| !**x).count(), k.len()),
                k.iter().map(|x| if *x { '1' } else { '0' }).collect::<String>(),
            ),
            None => ("-".to_string(), "-".to_string()),
        };
        println!(
            "{:<12} {:<7} {:>7} {:>6} {:>16} {:>9}  {}",
            id,
            r.kind,
            r.params,
            r.bits.as_deref().unwrap_or("32"),
            sparsity,
            pruned,
            mask
        );
    }
    if rows.values().any(|r| r.bits.as_deref() == Some("1*")) {
        println!("1* = selected for binarization, weights not yet binarized at this epoch");
    }
    if !activation_bits.is_empty() {
        println!("activation quantizers: {}", activation_bits.join(", "));
    }
    Ok(())
}
