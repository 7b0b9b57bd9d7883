//! Acceptance suite: one PASS/FAIL line per criterion. Built without the
//! libtest harness so the verdicts always reach stdout.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::panic;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squeeze::autodiff::gradcheck::{check_gradients, random_tensor};
use squeeze::autodiff::{Tape, Var};
use squeeze::binarization::{
    binarization_stage_at, binarize_activations, binarize_activations_var, binarize_weights, binarize_weights_var,
    weight_scales, WeightScheme,
};
use squeeze::compression::{create_compressed_model, CompressionConfig, Controller, ControllerStats};
use squeeze::graph::{load_model, run_graph, serialize_model, ForwardContext, LayerKind, Mode, ModelGraph, INPUT};
use squeeze::parallel::{set_execution_mode, ExecutionMode};
use squeeze::pruning::{apply_filter_pruning, filter_importance, strip_pruned_filters, Criterion, PruningConfig};
use squeeze::quantization::{
    estimate_hessian_trace, exact_hessian_trace, fake_quant_asymmetric, fake_quant_symmetric, quant_range_for,
    select_bitwidth_config, tune_asymmetric_range, AsymmetricFakeQuant, LayerCandidate, QuantRole, RatioRule,
    ScaleGradient, SymmetricFakeQuant,
};
use squeeze::sparsity::{
    magnitude_masks, rb_loss_value, rb_regularizer_loss, sample_gates, sparsity_level_at_epoch, ScheduleMode,
    SparsitySchedule, SparsityScheduler,
};
use squeeze::train::{cross_entropy, Preset};
use squeeze::trainer::{run_training, DataSource, TrainOutcome, TrainSpec};
use squeeze::{Error, Tensor};

type Outcome = Result<String, Box<dyn StdError>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

// Pinned tolerances.
const OP_GRAD_REL: f64 = 1e-5;
const FQ_GRAD_REL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
const HUTCHINSON_REL: f64 = 0.02;
const RB_GRAD_ABS: f64 = 1e-6;
const GM_ABS: f64 = 1e-10;
const EQUIV_ABS: f64 = 1e-9;
const E2E_FP32_MIN: f64 = 0.95;
const E2E_INT8_DROP: f64 = 0.02;
const E2E_STACK_DROP: f64 = 0.03;
const E2E_PRUNE_DROP: f64 = 0.03;

const QUANT_MATH_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const E2E_RUN_BUDGET: Duration = Duration::from_secs(300);

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "quantization math", quantization_math),
        (2, "gradients", gradients),
        (3, "hutchinson", hutchinson),
        (4, "mixed-precision oracle", mixed_precision_oracle),
        (5, "sparsity", sparsity),
        (6, "pruning soundness", pruning_soundness),
        (7, "binarization", binarization),
        (8, "end-to-end paired runs", end_to_end),
        (9, "round trip and determinism", round_trip),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(run);
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(Ok(detail)) => println!("criterion {n} ({name}): PASS in {secs:.1}s; {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL in {secs:.1}s; {e}");
            }
            Err(p) => {
                failed += 1;
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {n} ({name}): FAIL in {secs:.1}s; panicked: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Scalar oracles written directly from the quantization definitions.

fn bankers(x: f64) -> f64 {
    let f = x.floor();
    let d = x - f;
    // Halves go to the even neighbour.
    if d > 0.5 || (d == 0.5 && f % 2.0 != 0.0) {
        f + 1.0
    } else {
        f
    }
}

fn sym_oracle(r: f64, scale: f64, qmin: f64, qmax: f64) -> f64 {
    let v = (r * qmax / scale).max(qmin).min(qmax);
    bankers(v) * scale / qmax
}

/// `(low, high, z)` of the zero-point tuning scheme.
fn tune_oracle(r_min: f64, r_max: f64, bits: u32) -> (f64, f64, f64) {
    let levels = 2f64.powi(bits as i32) - 1.0;
    let l1 = r_min.min(0.0);
    let h1 = r_max.max(0.0);
    let z = bankers(-l1 * levels / (h1 - l1));
    if z == 0.0 || z == levels {
        let low = if z == 0.0 { 0.0 } else { l1 };
        let high = if z == levels { 0.0 } else { h1 };
        return (low, high, z);
    }
    let t = (z - levels) / z;
    let h2 = t * l1;
    let l2 = h1 / t;
    if h2 - l1 > h1 - l2 {
        (l1, h2, z)
    } else {
        (l2, h1, z)
    }
}

fn asym_oracle(r: f64, low: f64, high: f64, z: f64, bits: u32) -> f64 {
    let levels = 2f64.powi(bits as i32) - 1.0;
    let s = (high - low) / levels;
    let q = bankers(r.max(low).min(high) / s + z);
    s * (q - z)
}

fn distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn non_decreasing(xs: &[f64], ys: &[f64]) -> bool {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    idx.windows(2).all(|w| ys[w[0]] <= ys[w[1]])
}

const ROLES: [QuantRole; 3] = [QuantRole::Weights, QuantRole::SignedAct, QuantRole::UnsignedAct];

fn quantization_math() -> Outcome {
    let start = Instant::now();
    let table: [(u32, [(i64, i64); 3]); 3] = [
        (2, [(-1, 1), (-2, 1), (0, 3)]),
        (4, [(-7, 7), (-8, 7), (0, 15)]),
        (8, [(-127, 127), (-128, 127), (0, 255)]),
    ];
    for (bits, row) in table {
        for (role, expected) in ROLES.iter().zip(row) {
            ensure!(
                quant_range_for(bits, *role)? == expected,
                "range for {bits} bits {role:?}"
            );
        }
    }

    let t = tune_asymmetric_range(-1.0, 3.0, 8);
    let tf = (64.0 - 255.0) / 64.0;
    ensure!(
        t.zero_point == 64 && t.high == 3.0 && t.low == 3.0 / tf && (t.low + 1.005_235_6).abs() < 1e-7,
        "(-1, 3, 8) tuned to {t:?}"
    );
    let kept = tune_asymmetric_range(0.0, 1.0, 8);
    ensure!(
        kept.low == 0.0 && kept.high == 1.0 && kept.zero_point == 0,
        "(0, 1, 8) tuned to {kept:?}"
    );
    let kept = tune_asymmetric_range(-1.0, 0.0, 8);
    ensure!(
        kept.low == -1.0 && kept.high == 0.0 && kept.zero_point == 255,
        "(-1, 0, 8) tuned to {kept:?}"
    );

    const CASES: usize = 10_000;
    const PER_CASE: usize = 48;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..CASES {
        // Symmetric.
        let bits = rng.gen_range(2..=8u32);
        let role = ROLES[rng.gen_range(0..3)];
        let (qmin, qmax) = quant_range_for(bits, role)?;
        let (qmin, qmax) = (qmin as f64, qmax as f64);
        let scale = rng.gen_range(-3.0f64..3.0).exp();
        let mut r: Vec<f64> = (0..PER_CASE).map(|_| rng.gen_range(-2.0..2.0) * scale).collect();
        r.push(0.0);
        // Exact grid points and midpoints between them.
        let k = rng.gen_range(qmin..=qmax).round();
        r.push(k * scale / qmax);
        r.push((k + 0.5) * scale / qmax);
        let n = r.len();
        let rt = Tensor::new(vec![n], r.clone())?;
        let st = Tensor::new(vec![1], vec![scale])?;
        let q = fake_quant_symmetric(&rt, &st, bits, role)?;
        for (i, (&x, &y)) in r.iter().zip(q.data()).enumerate() {
            ensure!(
                y == sym_oracle(x, scale, qmin, qmax),
                "case {case}: Q({x}) = {y} disagrees with the oracle"
            );
            if i == PER_CASE {
                ensure!(y == 0.0, "case {case}: zero maps to {y}");
            }
        }
        let qq = fake_quant_symmetric(&q, &st, bits, role)?;
        ensure!(
            qq.data() == q.data(),
            "case {case}: symmetric quantization is not idempotent"
        );
        ensure!(
            non_decreasing(&r, q.data()),
            "case {case}: symmetric quantization is not monotone"
        );
        let span = qmax - qmin + 2.0;
        let m = 4 * (span as usize);
        let sweep: Vec<f64> = (0..=m)
            .map(|j| (qmin - 1.0 + span * j as f64 / m as f64) * scale / qmax)
            .collect();
        let sq = fake_quant_symmetric(&Tensor::new(vec![m + 1], sweep)?, &st, bits, role)?;
        ensure!(
            distinct(sq.data()) == (qmax - qmin + 1.0) as usize,
            "case {case}: {} symmetric levels, expected {}",
            distinct(sq.data()),
            qmax - qmin + 1.0
        );

        // Asymmetric.
        let bits = rng.gen_range(2..=8u32);
        let levels = 2f64.powi(bits as i32) - 1.0;
        let (lo, hi) = match rng.gen_range(0..4) {
            0 => (0.0, rng.gen_range(0.01..5.0)),
            1 => (-rng.gen_range(0.01..5.0), 0.0),
            2 => (rng.gen_range(0.1..1.0), rng.gen_range(1.0..3.0)),
            _ => (-rng.gen_range(0.01..5.0), rng.gen_range(0.01..5.0)),
        };
        let tuned = tune_asymmetric_range(lo, hi, bits);
        let (ol, oh, oz) = tune_oracle(lo, hi, bits);
        ensure!(
            tuned.low == ol && tuned.high == oh && tuned.zero_point as f64 == oz,
            "case {case}: tuning ({lo}, {hi}, {bits}) gave {tuned:?}, oracle ({ol}, {oh}, {oz})"
        );
        ensure!(
            (0.0..=levels).contains(&oz) && oz.fract() == 0.0,
            "case {case}: zero point {oz} not an integer level"
        );
        let s = (oh - ol) / levels;
        ensure!(
            (ol + oz * s).abs() <= 1e-9 * (oh - ol),
            "case {case}: zero does not sit on level {oz} of [{ol}, {oh}]"
        );
        let width = oh - ol;
        let mut r: Vec<f64> = (0..PER_CASE)
            .map(|_| rng.gen_range(ol - 0.5 * width..oh + 0.5 * width))
            .collect();
        r.push(0.0);
        let n = r.len();
        let lo_t = Tensor::new(vec![1], vec![lo])?;
        let hi_t = Tensor::new(vec![1], vec![hi])?;
        let q = fake_quant_asymmetric(&Tensor::new(vec![n], r.clone())?, &lo_t, &hi_t, bits)?;
        for (i, (&x, &y)) in r.iter().zip(q.data()).enumerate() {
            let o = asym_oracle(x, ol, oh, oz, bits);
            ensure!(y == o, "case {case}: asymmetric Q({x}) = {y}, oracle {o}");
            if i == PER_CASE {
                ensure!(y == 0.0, "case {case}: zero maps to {y} in the asymmetric mode");
            }
        }
        let qq = fake_quant_asymmetric(&q, &lo_t, &hi_t, bits)?;
        ensure!(
            qq.data() == q.data(),
            "case {case}: asymmetric quantization is not idempotent"
        );
        ensure!(
            non_decreasing(&r, q.data()),
            "case {case}: asymmetric quantization is not monotone"
        );
        let m = 4 * (levels as usize + 2);
        let sweep: Vec<f64> = (0..=m)
            .map(|j| ol - s + (width + 2.0 * s) * j as f64 / m as f64)
            .collect();
        let sq = fake_quant_asymmetric(&Tensor::new(vec![m + 1], sweep)?, &lo_t, &hi_t, bits)?;
        ensure!(
            distinct(sq.data()) == levels as usize + 1,
            "case {case}: {} asymmetric levels, expected {}",
            distinct(sq.data()),
            levels + 1.0
        );
    }
    let took = start.elapsed();
    ensure!(took < QUANT_MATH_BUDGET, "took {took:?}");
    Ok(format!(
        "{CASES} symmetric and {CASES} asymmetric cases, table and worked tuning cases exact"
    ))
}

// ---------------------------------------------------------------------------

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn b(f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Build {
    Box::new(f)
}

/// `sum(c * v)` with a fixed pseudo-random `c`, so every output entry
/// contributes a distinct weight to the checked gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
    let n = tape.value(v).len();
    let c: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let p = tape.mul_const(v, Arc::new(c)).unwrap();
    tape.sum(p)
}

fn positive(t: Tensor) -> Tensor {
    t.map(|x| x.abs() + 0.5)
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = |s: &[usize]| random_tensor(s, rng);
    let s23 = [2, 3];
    vec![
        (
            "add",
            vec![r(&s23), r(&s23)],
            b(|t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "sub",
            vec![r(&s23), r(&s23)],
            b(|t, v| {
                let o = t.sub(v[0], v[1]).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "mul",
            vec![r(&s23), r(&s23)],
            b(|t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "div",
            vec![r(&s23), positive(r(&s23))],
            b(|t, v| {
                let o = t.div(v[0], v[1]).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "neg",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.neg(v[0]);
                weighted_sum(t, o)
            }),
        ),
        (
            "scale",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.scale(v[0], -2.5);
                weighted_sum(t, o)
            }),
        ),
        (
            "add_scalar",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.add_scalar(v[0], 0.7);
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "exp",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.exp(v[0]);
                weighted_sum(t, o)
            }),
        ),
        (
            "log",
            vec![positive(r(&s23))],
            b(|t, v| {
                let o = t.log(v[0]);
                weighted_sum(t, o)
            }),
        ),
        (
            "sqrt",
            vec![positive(r(&s23))],
            b(|t, v| {
                let o = t.sqrt(v[0]);
                weighted_sum(t, o)
            }),
        ),
        (
            "sigmoid",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.sigmoid(v[0]);
                weighted_sum(t, o)
            }),
        ),
        (
            "square",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.square(v[0]);
                weighted_sum(t, o)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(r(&s23))],
            b(|t, v| {
                let o = t.relu(v[0]);
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "matmul",
            vec![r(&[3, 4]), r(&[4, 2])],
            b(|t, v| {
                let o = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "transpose",
            vec![r(&[3, 4])],
            b(|t, v| {
                let o = t.transpose(v[0]).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "reshape",
            vec![r(&[2, 6])],
            b(|t, v| {
                let o = t.reshape(v[0], &[3, 4]).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "broadcast_to",
            vec![r(&[1, 3])],
            b(|t, v| {
                let o = t.broadcast_to(v[0], &[4, 3]).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "sum_to",
            vec![r(&[4, 3])],
            b(|t, v| {
                let o = t.sum_to(v[0], &[1, 3]).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "sum",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.square(v[0]);
                let o = t.sum(o);
                t.square(o)
            }),
        ),
        (
            "mean",
            vec![r(&s23)],
            b(|t, v| {
                let o = t.square(v[0]);
                let o = t.mean(o);
                t.square(o)
            }),
        ),
        (
            "add_broadcast",
            vec![r(&[4, 3]), r(&[1, 3])],
            b(|t, v| {
                let o = t.add_broadcast(v[0], v[1]).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "mul_broadcast",
            vec![r(&[4, 3]), r(&[4, 1])],
            b(|t, v| {
                let o = t.mul_broadcast(v[0], v[1]).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "mul_const",
            vec![r(&s23)],
            b(|t, v| {
                let o = t
                    .mul_const(v[0], Arc::new(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]))
                    .unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "conv2d",
            vec![r(&[2, 3, 5, 5]), r(&[4, 3, 3, 3])],
            b(|t, v| {
                let o = t.conv2d(v[0], v[1], 1, 1).unwrap();
                weighted_sum(t, o)
            }),
        ),
        (
            "conv2d_strided",
            vec![r(&[1, 2, 6, 6]), r(&[3, 2, 2, 2])],
            b(|t, v| {
                let o = t.conv2d(v[0], v[1], 2, 0).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "max_pool2d",
            vec![r(&[2, 2, 4, 4])],
            b(|t, v| {
                let o = t.max_pool2d(v[0], 2, 2).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "gather",
            vec![r(&[5])],
            b(|t, v| {
                let o = t.gather(v[0], Arc::new(vec![4, 0, 0, 2]), &[2, 2]).unwrap();
                let o = t.square(o);
                weighted_sum(t, o)
            }),
        ),
        (
            "cross_entropy",
            vec![r(&[4, 3])],
            b(|t, v| cross_entropy(t, v[0], &[0, 2, 1, 2]).unwrap()),
        ),
        (
            "composite",
            vec![r(&[3, 4]), r(&[4, 1])],
            b(|t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let s = t.sigmoid(h);
                let e = t.exp(v[1]);
                let l = t.log(e);
                let a = t.sum(s);
                let b = t.sum(l);
                let m = t.mul(a, b).unwrap();
                t.square(m)
            }),
        ),
    ]
}

/// Values of `v = r * q_max / scale` kept at least 0.1 away from every
/// rounding edge.
fn clear_of_edges(v: f64) -> bool {
    (v - v.floor() - 0.5).abs() >= 0.1
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = op_cases(&mut rng);
    let n_ops = cases.len();
    for (name, inputs, build) in cases {
        let rep = check_gradients(&inputs, |t, v| build(t, v), FD_STEP);
        ensure!(
            rep.max_rel_error <= OP_GRAD_REL,
            "{name}: relative error {:e}",
            rep.max_rel_error
        );
    }

    // Symmetric scale gradient, per tensor and per channel.
    let mut fq_checks = 0;
    for trial in 0..60 {
        let bits = [2, 4, 8][trial % 3];
        let role = ROLES[(trial / 3) % 3];
        let (qmin, qmax) = quant_range_for(bits, role)?;
        let channels = if trial % 2 == 0 { 1 } else { 3 };
        let scales: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect();
        let per = 6;
        let mut r = Vec::new();
        while r.len() < channels * per {
            let c = r.len() / per;
            let x: f64 = rng.gen_range(-1.3..1.3) * scales[c];
            let v = x * qmax as f64 / scales[c];
            let v_clamped = v.clamp(qmin as f64, qmax as f64);
            if clear_of_edges(v_clamped) && (v - v_clamped).abs() < 1e-12 || (v - v_clamped).abs() > 0.1 {
                r.push(x);
            }
        }
        let r = Tensor::new(vec![channels, per], r)?;
        let op = Arc::new(SymmetricFakeQuant::new(bits, role, ScaleGradient::Exact)?);
        let rep = check_gradients(
            &[Tensor::new(vec![channels], scales)?],
            |t, v| {
                let rv = t.constant(r.clone());
                let o = op.clone().apply(t, rv, v[0]).unwrap();
                weighted_sum(t, o)
            },
            1e-6,
        );
        ensure!(
            rep.max_rel_error <= FQ_GRAD_REL,
            "symmetric scale gradient error {:e}",
            rep.max_rel_error
        );
        fq_checks += 1;
    }

    // Asymmetric gradients with respect to the raw bounds.
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < 100 {
        attempts += 1;
        ensure!(attempts < 100_000, "could not draw non-degenerate asymmetric cases");
        let bits = [2, 4, 8][attempts % 3];
        let levels = 2f64.powi(bits as i32) - 1.0;
        let lo = -rng.gen_range(0.1..2.0);
        let hi = rng.gen_range(0.1..2.0);
        let h = 1e-6;
        let base = tune_oracle(lo, hi, bits);
        // The zero point and branch must survive perturbation of either bound.
        let stable = [
            (lo + 10.0 * h, hi),
            (lo - 10.0 * h, hi),
            (lo, hi + 10.0 * h),
            (lo, hi - 10.0 * h),
        ]
        .iter()
        .all(|&(l, u)| {
            let t = tune_oracle(l, u, bits);
            t.2 == base.2 && ((t.0 == l.min(0.0)) == (base.0 == lo.min(0.0)))
        });
        if !stable {
            continue;
        }
        let (low, high, z) = base;
        let s = (high - low) / levels;
        let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(low - 0.3..high + 0.3)).collect();
        let clear = xs.iter().all(|&x| {
            let inside = x > low + 1e-3 && x < high - 1e-3;
            let outside = x < low - 1e-3 || x > high + 1e-3;
            outside || (inside && clear_of_edges(x / s + z))
        });
        if !clear {
            continue;
        }
        let r = Tensor::new(vec![8], xs)?;
        let op = Arc::new(AsymmetricFakeQuant::new(bits)?);
        let rep = check_gradients(
            &[Tensor::scalar(lo).reshape(&[1])?, Tensor::scalar(hi).reshape(&[1])?],
            |t, v| {
                let rv = t.constant(r.clone());
                let o = op.clone().apply(t, rv, v[0], v[1]).unwrap();
                weighted_sum(t, o)
            },
            h,
        );
        ensure!(
            rep.max_rel_error <= FQ_GRAD_REL,
            "asymmetric range gradient error {:e} at ({lo}, {hi}, {bits})",
            rep.max_rel_error
        );
        accepted += 1;
        fq_checks += 1;
    }

    // Straight-through contracts, checked exactly.
    let up: Vec<f64> = (0..7).map(|i| 1.0 + i as f64).collect();
    let upstream_sum = |tape: &mut Tape, o: Var| {
        let p = tape.mul_const(o, Arc::new(up.clone())).unwrap();
        tape.sum(p)
    };
    // Symmetric input gradient: upstream inside [q_min, q_max], zero outside.
    let xs = vec![-3.0, -1.0, -0.4, 0.0, 0.26, 1.0, 2.5];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![7], xs.clone())?.with_requires_grad(true));
    let sc = tape.leaf(Tensor::new(vec![1], vec![1.0])?.with_requires_grad(true));
    let o = Arc::new(SymmetricFakeQuant::new(4, QuantRole::Weights, ScaleGradient::Exact)?).apply(&mut tape, x, sc)?;
    let l = upstream_sum(&mut tape, o);
    let g = tape.backward(l)?;
    let expect: Vec<f64> = xs
        .iter()
        .zip(&up)
        .map(|(&x, &u)| if (-1.0..=1.0).contains(&x) { u } else { 0.0 })
        .collect();
    ensure!(
        g.wrt(x).data() == expect.as_slice(),
        "symmetric STE mask {:?}",
        g.wrt(x).data()
    );
    // Step-size variant: on-grid inputs give no scale gradient, saturated ones
    // pass the upstream through.
    for (values, want) in [(vec![0.0, 1.0, -3.0], 0.0), (vec![50.0, 90.0, 20.0], 6.0)] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], values)?);
        let sc = tape.leaf(Tensor::new(vec![1], vec![7.0])?.with_requires_grad(true));
        let o =
            Arc::new(SymmetricFakeQuant::new(4, QuantRole::Weights, ScaleGradient::Lsq)?).apply(&mut tape, x, sc)?;
        let s = tape.sum(o);
        let l = tape.scale(s, 2.0);
        let g = tape.backward(l)?.wrt(sc).item();
        ensure!(g == want, "step-size scale gradient {g}, expected {want}");
    }
    // Asymmetric input gradient: upstream inside the tuned range only.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![7], xs.clone())?.with_requires_grad(true));
    let lo = tape.leaf(Tensor::new(vec![1], vec![-1.0])?.with_requires_grad(true));
    let hi = tape.leaf(Tensor::new(vec![1], vec![2.0])?.with_requires_grad(true));
    let o = Arc::new(AsymmetricFakeQuant::new(8)?).apply(&mut tape, x, lo, hi)?;
    let l = upstream_sum(&mut tape, o);
    let g = tape.backward(l)?;
    let tr = tune_asymmetric_range(-1.0, 2.0, 8);
    let expect: Vec<f64> = xs
        .iter()
        .zip(&up)
        .map(|(&x, &u)| if x >= tr.low && x <= tr.high { u } else { 0.0 })
        .collect();
    ensure!(
        g.wrt(x).data() == expect.as_slice(),
        "asymmetric STE mask {:?}",
        g.wrt(x).data()
    );
    // Elementwise straight-through map.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7])?.with_requires_grad(true));
    let o = tape.ste_apply(x, |v| if v > 0.5 { 1.0 } else { 0.0 });
    ensure!(tape.value(o).data() == [0.0, 1.0], "indicator forward");
    let l = tape.sum(o);
    ensure!(tape.backward(l)?.wrt(x).data() == [1.0, 1.0], "indicator STE gradient");
    // Binarized weights pass the gradient through unchanged.
    let w = random_tensor(&[2, 3, 1, 1], &mut rng).with_requires_grad(true);
    let mut ctx = ForwardContext::new(Mode::Train);
    let wv = ctx.tape.leaf(w.clone());
    let b = binarize_weights_var(&mut ctx, wv, WeightScheme::Xnor)?;
    let l = weighted_sum(&mut ctx.tape, b);
    let gw = ctx.tape.backward(l)?.wrt(wv);
    let mut tape = Tape::new();
    let probe = tape.leaf(w.clone());
    let l = weighted_sum(&mut tape, probe);
    ensure!(gw.data() == tape.backward(l)?.wrt(probe).data(), "weight binarizer STE");
    // Activation binarizer surrogate: dx = s u, ds = Σ u (H - s t_c), dt_c = -Σ u s².
    let xs = Tensor::new(vec![1, 2, 1, 2], vec![0.7, 0.1, 0.5, 0.9])?;
    let (s, th) = (2.0, [0.25, 0.3]);
    let mut ctx = ForwardContext::new(Mode::Train);
    let xv = ctx.tape.leaf(xs.clone().with_requires_grad(true));
    let sv = ctx.tape.leaf(Tensor::scalar(s).with_requires_grad(true));
    let tv = ctx
        .tape
        .leaf(Tensor::new(vec![2], th.to_vec())?.with_requires_grad(true));
    let o = binarize_activations_var(&mut ctx, xv, sv, tv)?;
    let out = ctx.tape.value(o).clone();
    let u = [1.0, 2.0, 3.0, 4.0];
    let p = ctx.tape.mul_const(o, Arc::new(u.to_vec()))?;
    let l = ctx.tape.sum(p);
    let g = ctx.tape.backward(l)?;
    let hv: Vec<f64> = out.data().iter().map(|&y| if y > 0.0 { 1.0 } else { 0.0 }).collect();
    let want_s: f64 = (0..4).map(|i| u[i] * (hv[i] - s * th[i / 2])).sum();
    let want_t = [-(u[0] + u[1]) * s * s, -(u[2] + u[3]) * s * s];
    ensure!(
        g.wrt(xv).data() == [2.0, 4.0, 6.0, 8.0],
        "activation binarizer input gradient"
    );
    ensure!(
        (g.wrt(sv).item() - want_s).abs() < 1e-12,
        "activation binarizer scale gradient"
    );
    ensure!(g.wrt(tv).data() == want_t, "activation binarizer threshold gradient");

    let took = start.elapsed();
    ensure!(took < GRADIENT_BUDGET, "took {took:?}");
    Ok(format!("{n_ops} op checks within {OP_GRAD_REL:e}, {fq_checks} fake-quant checks within {FQ_GRAD_REL:e}, STE contracts exact"))
}

// ---------------------------------------------------------------------------

fn hutchinson() -> Outcome {
    let diag = |t: &mut Tape| -> squeeze::Result<(Var, Vec<Var>)> {
        let x = t.leaf(Tensor::new(vec![3], vec![0.3, -1.2, 2.0])?.with_requires_grad(true));
        let x2 = t.square(x);
        let w = t.mul_const(x2, Arc::new(vec![0.5, 1.0, 1.5]))?;
        Ok((t.sum(w), vec![x]))
    };
    for seed in 0..25 {
        for n in [1, 3, 17] {
            let est = estimate_hessian_trace(diag, n, seed)?;
            ensure!(est == 6.0, "diag(1, 2, 3) estimate {est} with seed {seed}, {n} samples");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = vec![0.0; 64];
    for i in 0..8 {
        a[i * 8 + i] = rng.gen_range(1.0..4.0);
        for j in 0..i {
            let v = rng.gen_range(-0.5..0.5);
            a[i * 8 + j] = v;
            a[j * 8 + i] = v;
        }
    }
    let analytic: f64 = (0..8).map(|i| a[i * 8 + i]).sum();
    let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let quad = move |t: &mut Tape| -> squeeze::Result<(Var, Vec<Var>)> {
        let am = t.constant(Tensor::new(vec![8, 8], a.clone())?);
        let x = t.leaf(Tensor::new(vec![8, 1], x0.clone())?.with_requires_grad(true));
        let ax = t.matmul(am, x)?;
        let xax = t.mul(x, ax)?;
        let s = t.sum(xax);
        Ok((t.scale(s, 0.5), vec![x]))
    };
    let exact = exact_hessian_trace(quad.clone())?;
    ensure!(
        (exact - analytic).abs() < 1e-12,
        "exact trace {exact} vs analytic {analytic}"
    );
    let est = estimate_hessian_trace(quad, 10_000, 9)?;
    let rel = (est - analytic).abs() / analytic;
    ensure!(
        rel <= HUTCHINSON_REL,
        "estimate {est} vs {analytic}: {:.3}%",
        rel * 100.0
    );
    Ok(format!(
        "diag trace exactly 6 on 75 draws; 8-parameter quadratic {est:.4} vs {analytic:.4} ({:.3}% off)",
        rel * 100.0
    ))
}

// ---------------------------------------------------------------------------

struct Instance {
    layers: Vec<LayerCandidate>,
    bits: Vec<u32>,
    threshold: f64,
    rule: RatioRule,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let bit_sets: [&[u32]; 4] = [&[4, 8], &[2, 4, 8], &[2, 3, 4, 6, 8], &[4, 6, 8]];
    let bits = bit_sets[rng.gen_range(0..bit_sets.len())].to_vec();
    let n = rng.gen_range(1..=6);
    let tied = rng.gen_bool(0.4);
    let layers = (0..n)
        .map(|i| {
            let avg_trace = if tied {
                rng.gen_range(0..3) as f64
            } else {
                rng.gen_range(0.0..10.0)
            };
            let mut p = rng.gen_range(0.5..4.0);
            let perturbations = bits
                .iter()
                .map(|&b| {
                    p *= rng.gen_range(0.05..0.9);
                    (b, if rng.gen_bool(0.1) { 0.0 } else { p })
                })
                .collect();
            LayerCandidate {
                name: format!("layer{i}"),
                avg_trace,
                flops: rng.gen_range(1..100) as f64,
                perturbations,
            }
        })
        .collect();
    Instance {
        layers,
        threshold: rng.gen_range(1.0..2.5),
        rule: if rng.gen_bool(0.8) {
            RatioRule::AtLeast
        } else {
            RatioRule::AtMost
        },
        bits,
    }
}

/// Exhaustive search over all assignments, keeping the trace-monotone
/// feasible ones; ties go to the larger bit complexity, then to the
/// lexicographically larger assignment.
fn brute_force(inst: &Instance) -> Option<(Vec<u32>, f64)> {
    let n = inst.layers.len();
    let c = inst.bits.len();
    let mut best: Option<(f64, f64, Vec<u32>)> = None;
    for code in 0..c.pow(n as u32) {
        let assign: Vec<u32> = (0..n).map(|i| inst.bits[(code / c.pow(i as u32)) % c]).collect();
        let monotone = (0..n)
            .all(|i| (0..n).all(|j| !(inst.layers[i].avg_trace < inst.layers[j].avg_trace) || assign[i] <= assign[j]));
        if !monotone {
            continue;
        }
        let int8: f64 = inst.layers.iter().map(|l| l.flops * 8.0).sum();
        let cost: f64 = inst.layers.iter().zip(&assign).map(|(l, &b)| l.flops * b as f64).sum();
        let ratio = int8 / cost;
        let ok = match inst.rule {
            RatioRule::AtLeast => ratio >= inst.threshold,
            RatioRule::AtMost => ratio <= inst.threshold,
        };
        if !ok {
            continue;
        }
        let metric: f64 = inst
            .layers
            .iter()
            .zip(&assign)
            .map(|(l, &b)| l.avg_trace * l.perturbations.iter().find(|(pb, _)| *pb == b).unwrap().1)
            .sum();
        let better = match &best {
            None => true,
            Some((m, k, a)) => metric < *m || (metric == *m && (cost > *k || (cost == *k && assign > *a))),
        };
        if better {
            best = Some((metric, cost, assign));
        }
    }
    best.map(|(m, _, a)| (a, m))
}

fn mixed_precision_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut feasible, mut infeasible) = (0, 0);
    for k in 0..400 {
        let inst = random_instance(&mut rng);
        let got = select_bitwidth_config(&inst.layers, &inst.bits, inst.threshold, inst.rule);
        match (brute_force(&inst), got) {
            (Some((bits, metric)), Ok(plan)) => {
                ensure!(
                    plan.bits == bits,
                    "instance {k}: picked {:?}, oracle {bits:?}",
                    plan.bits
                );
                ensure!(
                    plan.metric == metric,
                    "instance {k}: metric {} vs {metric}",
                    plan.metric
                );
                feasible += 1;
            }
            (None, Err(Error::NoFeasibleConfig(_))) => infeasible += 1,
            (want, got) => return Err(format!("instance {k}: oracle {want:?}, got {got:?}").into()),
        }
    }
    ensure!(feasible >= 200, "only {feasible} feasible instances");
    Ok(format!(
        "{feasible} feasible and {infeasible} infeasible instances agree with exhaustive search"
    ))
}

// ---------------------------------------------------------------------------

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn schedule(mode: ScheduleMode, init: f64, target: f64, epochs: usize) -> SparsitySchedule {
    SparsitySchedule {
        mode,
        init,
        target,
        epochs,
        ..SparsitySchedule::constant(0.0)
    }
}

fn sparsity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Density loss values and gradients.
    for _ in 0..200 {
        let shapes = [vec![rng.gen_range(1..6), 3], vec![rng.gen_range(1..9)]];
        let scores: Vec<Tensor> = shapes
            .iter()
            .map(|s| random_tensor(s, &mut rng).map(|x| 2.0 * x))
            .collect();
        let level = rng.gen_range(0.0..0.95);
        let n: usize = scores.iter().map(|s| s.len()).sum();
        let mean: f64 = scores.iter().flat_map(|s| s.data()).map(|&x| sig(x)).sum::<f64>() / n as f64;
        let want = (mean - (1.0 - level)).powi(2);
        let refs: Vec<&Tensor> = scores.iter().collect();
        ensure!(
            (rb_loss_value(&refs, level) - want).abs() <= 1e-15,
            "density loss value"
        );
        let mut tape = Tape::new();
        let vars: Vec<Var> = scores
            .iter()
            .map(|s| tape.leaf(s.clone().with_requires_grad(true)))
            .collect();
        let l = rb_regularizer_loss(&mut tape, &vars, level)?;
        ensure!((tape.value(l).item() - want).abs() <= 1e-15, "density loss on the tape");
        let g = tape.backward(l)?;
        for (v, s) in vars.iter().zip(&scores) {
            for (gi, &x) in g.wrt(*v).data().iter().zip(s.data()) {
                let analytic = 2.0 * (mean - (1.0 - level)) * sig(x) * (1.0 - sig(x)) / n as f64;
                ensure!(
                    (gi - analytic).abs() <= 1e-15,
                    "density loss gradient {gi} vs {analytic}"
                );
            }
        }
        let rep = check_gradients(&scores, |t, v| rb_regularizer_loss(t, v, level).unwrap(), FD_STEP);
        ensure!(
            rep.max_abs_error <= RB_GRAD_ABS,
            "density loss finite differences {:e}",
            rep.max_abs_error
        );
    }
    ensure!(
        rb_loss_value(&[&Tensor::full(&[4], 40.0)], 0.5) == 0.25,
        "all-on gates at level 0.5"
    );
    ensure!(
        rb_loss_value(&[&Tensor::zeros(&[4])], 0.5) == 0.0,
        "density at the target"
    );

    // Gate frequencies.
    const DRAWS: usize = 10_000;
    let probs: [f64; 5] = [0.5, 0.9, 0.1, 0.73, 0.02];
    let scores = Tensor::new(vec![probs.len()], probs.iter().map(|p| (p / (1.0 - p)).ln()).collect())?;
    let mut counts = vec![0.0; probs.len()];
    let mut gate_rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..DRAWS {
        for (c, z) in counts.iter_mut().zip(sample_gates(&scores, &mut gate_rng).data()) {
            *c += z;
        }
    }
    for (&p, c) in probs.iter().zip(&counts) {
        let freq = c / DRAWS as f64;
        let sigma = (p * (1.0 - p) / DRAWS as f64).sqrt();
        ensure!((freq - p).abs() <= 3.0 * sigma, "gate frequency {freq} for p = {p}");
    }

    // Magnitude masks against a sort-and-cut oracle.
    for _ in 0..300 {
        let layers: Vec<Tensor> = (0..rng.gen_range(1..4))
            .map(|_| random_tensor(&[rng.gen_range(1..5), rng.gen_range(1..6)], &mut rng))
            .collect();
        let level = rng.gen_range(0.0..0.99);
        let refs: Vec<&Tensor> = layers.iter().collect();
        let masks = magnitude_masks(&refs, level)?;
        let total: usize = layers.iter().map(|l| l.len()).sum();
        let zeros: usize = masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v == 0.0).count())
            .sum();
        ensure!(
            (zeros as f64 / total as f64 - level).abs() <= 1.0 / total as f64,
            "{zeros} zeros of {total} at level {level}"
        );
        let mut imp: Vec<(f64, usize, usize)> = Vec::new();
        for (l, w) in layers.iter().enumerate() {
            let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            imp.extend(w.data().iter().enumerate().map(|(i, x)| (x.abs() / norm, l, i)));
        }
        imp.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(_, l, i) in &imp[..zeros] {
            ensure!(masks[l].data()[i] == 0.0, "mask keeps a weight the oracle drops");
        }
    }
    let w = Tensor::new(vec![4], vec![0.1, -0.5, 0.2, 0.9])?;
    ensure!(
        magnitude_masks(&[&w], 0.5)?[0].data() == [0.0, 1.0, 0.0, 1.0],
        "single-layer worked case"
    );

    // Scheduled sparsity on a wrapped model.
    let cfg = CompressionConfig::from_json(
        r#"{"algorithms": [{"magnitude_sparsity": {"schedule": {"mode": "polynomial", "target": 0.6, "epochs": 4, "power": 2}}}]}"#,
    )?;
    let graph = Preset::CnnSmall.build(&[1, 8, 8], 2, 3)?;
    let mut model = create_compressed_model(graph, &cfg, None)?;
    for epoch in 0..6 {
        let scheduled = if epoch >= 4 {
            0.6
        } else {
            0.6 * (epoch as f64 / 4.0).powi(2)
        };
        let Controller::Sparsity(alg) = &model.controllers[0] else {
            return Err("expected a sparsity controller".into());
        };
        let masks = alg.masks();
        let total: usize = masks.iter().map(|m| m.len()).sum();
        let zeros: usize = masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v == 0.0).count())
            .sum();
        ensure!(
            (zeros as f64 / total as f64 - scheduled).abs() <= 1.0 / total as f64,
            "epoch {epoch}: {zeros}/{total} zeros, scheduled {scheduled}"
        );
        model.epoch_step(None)?;
    }

    // Schedule trajectories.
    let (init, target, e) = (0.1, 0.7, 10);
    let horizon = e + 3;
    let poly = SparsitySchedule {
        power: 3.0,
        ..schedule(ScheduleMode::Polynomial, init, target, e)
    };
    let expo = schedule(ScheduleMode::Exponential, init, target, e);
    let multi = SparsitySchedule {
        steps: vec![(0, 0.2), (3, 0.4), (7, 0.6)],
        ..schedule(ScheduleMode::Multistep, init, target, e)
    };
    let trajectories: [(&SparsitySchedule, Box<dyn Fn(usize) -> f64>); 3] = [
        (
            &poly,
            Box::new(|k| init + (target - init) * (k as f64 / e as f64).powi(3)),
        ),
        (
            &expo,
            Box::new(|k| target - (target - init) * (-5.0 * k as f64 / e as f64).exp()),
        ),
        (
            &multi,
            Box::new(|k| {
                if k >= 7 {
                    0.6
                } else if k >= 3 {
                    0.4
                } else {
                    0.2
                }
            }),
        ),
    ];
    for (spec, formula) in &trajectories {
        let mut sched = SparsityScheduler::new((*spec).clone())?;
        for k in 0..horizon {
            let want = if k >= e { target } else { formula(k) };
            let level = if k == 0 {
                sched.level
            } else {
                sched.epoch_step(Some(1.0))
            };
            ensure!(
                (level - want).abs() <= 1e-12,
                "{:?} epoch {k}: {level} vs {want}",
                spec.mode
            );
            ensure!(
                (sparsity_level_at_epoch(spec, k)? - want).abs() <= 1e-12,
                "{:?} closed form at epoch {k}",
                spec.mode
            );
        }
    }
    let adaptive = SparsitySchedule {
        patience: 0.01,
        step: 0.1,
        ..schedule(ScheduleMode::Adaptive, init, target, e)
    };
    let losses = [1.0, 0.8, 0.795, 0.9, 0.5, 0.499, 0.49, 0.3, 0.31, 0.2, 0.1, 0.1];
    let mut sched = SparsityScheduler::new(adaptive.clone())?;
    let (mut level, mut best): (f64, Option<f64>) = (init, None);
    ensure!(sched.level == init, "adaptive start");
    for (k, &m) in losses.iter().enumerate() {
        if let Some(b) = best {
            if b - m < adaptive.patience {
                level = (level + adaptive.step).min(target);
            }
        }
        best = Some(best.map_or(m, |b: f64| b.min(m)));
        if k + 1 >= e {
            level = target;
        }
        let got = sched.epoch_step(Some(m));
        ensure!(
            (got - level).abs() <= 1e-12,
            "adaptive epoch {}: {got} vs {level}",
            k + 1
        );
    }
    Ok("density loss exact, gate frequencies within 3 sigma, masks and four schedules match their formulas".into())
}

// ---------------------------------------------------------------------------

type Topology = fn(&mut ModelGraph, &mut ChaCha8Rng) -> squeeze::Result<()>;

fn topologies() -> Vec<(&'static str, Vec<usize>, Topology)> {
    vec![
        ("conv-bn-relu chain into fc", vec![2, 6, 6], |g, r| {
            g.conv2d("c1", INPUT, 6, 3, 1, 1, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.conv2d("c2", "r1", 8, 3, 1, 1, true, r)?;
            g.batch_norm("b2", "c2")?;
            g.relu("r2", "b2")?;
            g.flatten("f", "r2")?;
            g.fully_connected("fc", "f", 3, r)
        }),
        ("plain conv chain ending in a conv", vec![1, 7, 7], |g, r| {
            g.conv2d("c1", INPUT, 5, 3, 1, 0, true, r)?;
            g.relu("r1", "c1")?;
            g.conv2d("c2", "r1", 7, 3, 1, 1, true, r)?;
            g.relu("r2", "c2")?;
            g.conv2d("c3", "r2", 2, 1, 1, 0, true, r)
        }),
        ("pooling between convs", vec![3, 8, 8], |g, r| {
            g.conv2d("c1", INPUT, 8, 3, 1, 1, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.max_pool2d("p1", "r1", 2, 2)?;
            g.conv2d("c2", "p1", 6, 3, 1, 1, false, r)?;
            g.relu("r2", "c2")?;
            g.flatten("f", "r2")?;
            g.fully_connected("fc", "f", 4, r)
        }),
        ("residual block with mismatched masks", vec![1, 6, 6], |g, r| {
            g.conv2d("c1", INPUT, 6, 3, 1, 1, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.conv2d("c2", "r1", 5, 3, 1, 1, true, r)?;
            g.batch_norm("b2", "c2")?;
            g.relu("r2", "b2")?;
            g.conv2d("c3", "r2", 6, 3, 1, 1, true, r)?;
            g.batch_norm("b3", "c3")?;
            g.add("add", "b3", "r1")?;
            g.relu("r3", "add")?;
            g.flatten("f", "r3")?;
            g.fully_connected("fc", "f", 2, r)
        }),
        ("residual add of one conv with itself", vec![2, 5, 5], |g, r| {
            g.conv2d("c1", INPUT, 6, 3, 1, 1, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.add("add", "r1", "b1")?;
            g.conv2d("c2", "add", 4, 3, 1, 1, true, r)?;
            g.relu("r2", "c2")?;
            g.flatten("f", "r2")?;
            g.fully_connected("fc", "f", 3, r)
        }),
        ("strided conv without bias", vec![2, 9, 9], |g, r| {
            g.conv2d("c1", INPUT, 7, 3, 2, 0, false, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.conv2d("c2", "r1", 5, 2, 1, 0, true, r)?;
            g.relu("r2", "c2")?;
            g.flatten("f", "r2")?;
            g.fully_connected("fc", "f", 2, r)
        }),
        ("conv straight into flatten and fc", vec![1, 4, 4], |g, r| {
            g.conv2d("c1", INPUT, 9, 3, 1, 1, true, r)?;
            g.flatten("f", "c1")?;
            g.fully_connected("fc", "f", 3, r)
        }),
        ("two branches joined by add", vec![2, 6, 6], |g, r| {
            g.conv2d("c1", INPUT, 6, 3, 1, 1, true, r)?;
            g.relu("r1", "c1")?;
            g.conv2d("c2a", "r1", 4, 3, 1, 1, true, r)?;
            g.conv2d("c2b", "r1", 4, 1, 1, 0, true, r)?;
            g.add("add", "c2a", "c2b")?;
            g.relu("r2", "add")?;
            g.flatten("f", "r2")?;
            g.fully_connected("fc", "f", 2, r)
        }),
        ("deep chain with two pools", vec![1, 8, 8], |g, r| {
            g.conv2d("c1", INPUT, 4, 3, 1, 1, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.conv2d("c2", "r1", 6, 3, 1, 1, true, r)?;
            g.batch_norm("b2", "c2")?;
            g.relu("r2", "b2")?;
            g.max_pool2d("p1", "r2", 2, 2)?;
            g.conv2d("c3", "p1", 8, 3, 1, 1, true, r)?;
            g.batch_norm("b3", "c3")?;
            g.relu("r3", "b3")?;
            g.max_pool2d("p2", "r3", 2, 2)?;
            g.conv2d("c4", "p2", 5, 1, 1, 0, true, r)?;
            g.relu("r4", "c4")?;
            g.flatten("f", "r4")?;
            g.fully_connected("fc", "f", 3, r)
        }),
        ("skip from the input", vec![4, 5, 5], |g, r| {
            g.conv2d("c1", INPUT, 4, 3, 1, 1, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.add("add", "b1", INPUT)?;
            g.relu("r1", "add")?;
            g.conv2d("c2", "r1", 6, 3, 1, 1, true, r)?;
            g.relu("r2", "c2")?;
            g.flatten("f", "r2")?;
            g.fully_connected("fc", "f", 2, r)
        }),
        ("pointwise convs on three channels", vec![3, 4, 4], |g, r| {
            g.conv2d("c1", INPUT, 10, 1, 1, 0, true, r)?;
            g.batch_norm("b1", "c1")?;
            g.relu("r1", "b1")?;
            g.conv2d("c2", "r1", 10, 1, 1, 0, true, r)?;
            g.batch_norm("b2", "c2")?;
            g.relu("r2", "b2")?;
            g.conv2d("c3", "r2", 3, 1, 1, 0, true, r)?;
            g.flatten("f", "c3")?;
            g.fully_connected("fc", "f", 2, r)
        }),
    ]
}

/// Random conv biases and batch-norm statistics.
fn randomize(g: &ModelGraph, rng: &mut ChaCha8Rng) {
    for node in g.nodes() {
        for (name, p) in &node.params {
            let mut t = p.write();
            let fill: Box<dyn Fn(&mut ChaCha8Rng) -> f64> = match name.as_str() {
                "bias" | "beta" | "running_mean" => Box::new(|r| r.gen_range(-0.5..0.5)),
                "gamma" => Box::new(|r| r.gen_range(0.5..1.5)),
                "running_var" => Box::new(|r| r.gen_range(0.3..2.0)),
                _ => continue,
            };
            for v in t.data_mut() {
                *v = fill(rng);
            }
        }
    }
}

/// Hook-free copy with the pruned filters zeroed in each convolution and
/// in the batch norms reading it directly.
fn bake_masks(g: &ModelGraph, masks: &BTreeMap<String, Vec<bool>>) -> ModelGraph {
    let baked = g.detached_copy();
    for node in baked.nodes() {
        let (source, names): (&str, &[&str]) = match masks.get(&node.id) {
            Some(_) => (node.id.as_str(), &["weight", "bias"]),
            None if matches!(node.kind, LayerKind::BatchNorm { .. }) => (node.inputs[0].as_str(), &["gamma", "beta"]),
            None => continue,
        };
        let Some(keep) = masks.get(source) else { continue };
        for name in names {
            if let Some(p) = node.param(name) {
                let mut t = p.write();
                let per = t.len() / keep.len();
                for (chunk, &k) in t.data_mut().chunks_mut(per).zip(keep) {
                    if !k {
                        chunk.fill(0.0);
                    }
                }
            }
        }
    }
    baked
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn pruning_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pruned_convs = 0;
    let list = topologies();
    for (name, shape, build) in &list {
        let mut g = ModelGraph::new(shape.clone());
        build(&mut g, &mut rng)?;
        randomize(&g, &mut rng);
        let rate = rng.gen_range(0.25..0.6);
        let mut hooked = g.detached_copy();
        let cfg = PruningConfig {
            criterion: Criterion::GeometricMedian,
            pruning_rate: rate,
            scheduler: Default::default(),
            exclude: Some(vec![]),
        };
        let alg = apply_filter_pruning(&mut hooked, &cfg)?;
        let masks = alg.masks();
        let pruned: usize = masks.values().map(|k| k.iter().filter(|v| !**v).count()).sum();
        ensure!(pruned > 0, "{name}: nothing pruned at rate {rate}");
        pruned_convs += masks.len();
        let baked = bake_masks(&g, &masks);
        let stripped = strip_pruned_filters(&baked, &masks)?;
        let mut dims = vec![100];
        dims.extend(shape);
        let x = Tensor::from_fn(&dims, |_| rng.gen_range(-2.0..2.0));
        let masked_out = run_graph(&hooked, &x, Mode::Eval)?;
        let stripped_out = run_graph(&stripped, &x, Mode::Eval)?;
        let d = max_diff(&masked_out, &stripped_out);
        ensure!(d <= EQUIV_ABS, "{name}: stripped differs from masked by {d:e}");
        let d = max_diff(&masked_out, &run_graph(&baked, &x, Mode::Eval)?);
        ensure!(
            d <= EQUIV_ABS,
            "{name}: hooked masks differ from zeroed filters by {d:e}"
        );
        ensure!(
            stripped.parameter_count() < g.parameter_count(),
            "{name}: stripping kept {} of {} parameters",
            stripped.parameter_count(),
            g.parameter_count()
        );
    }

    for _ in 0..50 {
        let n = rng.gen_range(2..9);
        let w = random_tensor(&[n, rng.gen_range(1..4), 2, 2], &mut rng);
        let d = w.len() / n;
        let got = filter_importance(&w, Criterion::GeometricMedian)?;
        ensure!(got.len() == n, "{} scores for {n} filters", got.len());
        for (i, score) in got.iter().enumerate() {
            let mut g = 0.0;
            for j in 0..n {
                let dist: f64 = (0..d)
                    .map(|k| (w.data()[i * d + k] - w.data()[j * d + k]).powi(2))
                    .sum();
                g += dist.sqrt();
            }
            ensure!((score - g).abs() <= GM_ABS, "GM score {score} vs brute force {g}");
        }
    }
    let example = filter_importance(
        &Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0])?,
        Criterion::GeometricMedian,
    )?;
    let r2 = 1.0 + 2f64.sqrt();
    ensure!(
        (example[0] - 2.0).abs() <= GM_ABS && (example[1] - r2).abs() <= GM_ABS && (example[2] - r2).abs() <= GM_ABS,
        "worked GM scores {example:?}"
    );
    Ok(format!("{} topologies ({pruned_convs} prunable convs) equivalent within {EQUIV_ABS:e}; GM brute force and worked scores match", list.len()))
}

// ---------------------------------------------------------------------------

fn binarization() -> Outcome {
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -3.0, 2.0, -2.0])?;
    let b = binarize_weights(&w, WeightScheme::Dorefa)?;
    ensure!(
        b.data() == [2.0, -2.0, 2.0, -2.0],
        "DoReFa worked case gave {:?}",
        b.data()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let (o, c, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
        let w = random_tensor(&[o, c, k, k], &mut rng);
        for scheme in [WeightScheme::Xnor, WeightScheme::Dorefa] {
            let alphas = weight_scales(&w, scheme)?;
            let b = binarize_weights(&w, scheme)?;
            for (i, (&x, &y)) in w.data().iter().zip(b.data()).enumerate() {
                let ch = (i / (k * k)) % c;
                let alpha = match scheme {
                    WeightScheme::Dorefa => w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64,
                    WeightScheme::Xnor => {
                        let mut s = 0.0;
                        for oo in 0..o {
                            for kk in 0..k * k {
                                s += w.data()[(oo * c + ch) * k * k + kk].abs();
                            }
                        }
                        s / (o * k * k) as f64
                    }
                };
                let a = alphas[if scheme == WeightScheme::Dorefa { 0 } else { ch }];
                ensure!((a - alpha).abs() <= 1e-12, "{scheme:?} scale {a} vs {alpha}");
                ensure!(
                    y == if x >= 0.0 { a } else { -a },
                    "{scheme:?} output {y} outside {{±{a}}}"
                );
            }
        }
        let x = random_tensor(&[2, c, 3, 3], &mut rng);
        let s = rng.gen_range(0.1..3.0);
        let t: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = binarize_activations(&x, s, &t)?;
        for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
            let want = if xi - s * t[(i / 9) % c] > 0.0 { s } else { 0.0 };
            ensure!(yi == want, "activation output {yi}, expected {want}");
        }
    }
    let one = Tensor::new(vec![1, 1, 1, 2], vec![0.7, 0.5])?;
    ensure!(
        binarize_activations(&one, 2.0, &[0.25])?.data() == [2.0, 0.0],
        "activation worked cases"
    );

    // Durations (2, 2, 2, 4): full precision, activations, both, then decay.
    let durations = [2, 2, 2, 4];
    for epoch in 0..14 {
        let info = binarization_stage_at(epoch, durations)?;
        let (stage, acts, weights) = match epoch {
            0 | 1 => (1, false, false),
            2 | 3 => (2, true, false),
            4 | 5 => (3, true, true),
            _ => (4, true, true),
        };
        let lr = if stage < 4 {
            1.0
        } else {
            (1.0 - ((epoch - 6) as f64 / 4.0).min(1.0)).powi(2)
        };
        ensure!(
            info.stage == stage
                && info.activations == acts
                && info.weights == weights
                && (info.lr_factor - lr).abs() <= 1e-15
                && info.weight_decay == (stage < 4),
            "epoch {epoch}: {info:?}"
        );
    }
    Ok("worked cases exact, 200 random tensors confined to their binary sets, stage flags match".into())
}

// ---------------------------------------------------------------------------

fn train(config: &str, samples: usize, epochs: usize) -> Result<(TrainOutcome, Duration), Box<dyn StdError>> {
    let mut spec = TrainSpec::new(DataSource::Bars { samples }, Preset::CnnSmall);
    spec.epochs = epochs;
    let cfg = CompressionConfig::from_json(config)?;
    let start = Instant::now();
    let out = run_training(&spec, &cfg, |_| {})?;
    Ok((out, start.elapsed()))
}

const FP32: &str = r#"{"algorithms": []}"#;
const INT8: &str = r#"{"algorithms": [{"quantization": {"bits": 8}}]}"#;
const INT8_SPARSE: &str = r#"{"algorithms": [
    {"magnitude_sparsity": {"schedule": {"mode": "polynomial", "target": 0.5, "epochs": 4}}},
    {"quantization": {"bits": 8}}]}"#;
const GM30: &str = r#"{"algorithms": [
    {"filter_pruning": {"pruning_rate": 0.3, "criterion": "geometric_median",
                        "scheduler": {"mode": "baseline", "warmup_epochs": 2}}}]}"#;

/// Parameter count of cnn-small on 1×8×8 inputs with two classes when
/// `k1` of conv1's 8 filters and `k2` of conv2's 16 survive: conv weights
/// and biases, batch-norm affine pairs, conv3 (16 filters) and the head.
fn cnn_small_params(k1: usize, k2: usize) -> usize {
    let conv1 = k1 * 9 + k1 + 2 * k1;
    let conv2 = k2 * k1 * 9 + k2 + 2 * k2;
    let conv3 = 16 * k2 * 9 + 16;
    let fc = 2 * 16 * 4 * 4 + 2;
    conv1 + conv2 + conv3 + fc
}

fn end_to_end() -> Outcome {
    const EPOCHS: usize = 8;
    let mut acc = BTreeMap::new();
    let mut details = Vec::new();
    for (name, cfg) in [
        ("fp32", FP32),
        ("int8", INT8),
        ("int8+sparse50", INT8_SPARSE),
        ("gm30", GM30),
    ] {
        let (out, took) = train(cfg, 600, EPOCHS)?;
        ensure!(took < E2E_RUN_BUDGET, "{name} took {took:?}");
        let a = out.records.last().ok_or("no epochs")?.val_accuracy;
        details.push(format!("{name} {:.1}% in {:.0}s", a * 100.0, took.as_secs_f64()));
        acc.insert(name, a);
        match name {
            "int8+sparse50" => {
                let stats = out.model.statistics();
                let s = stats
                    .iter()
                    .find_map(|s| match s {
                        ControllerStats::Sparsity(s) => Some(s),
                        _ => None,
                    })
                    .ok_or("no sparsity statistics")?;
                let total: usize = s.layers.values().map(|l| l.1).sum();
                ensure!(
                    (s.achieved_level - 0.5).abs() <= 1.0 / total as f64,
                    "achieved sparsity {}",
                    s.achieved_level
                );
            }
            "gm30" => {
                let exported = out.model.export()?;
                let base = out.model.graph.parameter_count();
                let (k1, k2) = (
                    8 - (0.3f64 * 8.0).floor() as usize,
                    16 - (0.3f64 * 16.0).floor() as usize,
                );
                ensure!(base == cnn_small_params(8, 16), "unpruned count {base}");
                let want = cnn_small_params(k1, k2);
                ensure!(
                    exported.parameter_count() == want,
                    "exported {} parameters, oracle {want}",
                    exported.parameter_count()
                );
                details.push(format!("params {base} -> {want}"));
            }
            _ => {}
        }
    }
    let fp32 = acc["fp32"];
    ensure!(fp32 >= E2E_FP32_MIN, "fp32 accuracy {fp32}");
    ensure!(
        acc["int8"] >= fp32 - E2E_INT8_DROP,
        "int8 {} vs fp32 {fp32}",
        acc["int8"]
    );
    ensure!(
        acc["int8+sparse50"] >= fp32 - E2E_STACK_DROP,
        "stacked {} vs fp32 {fp32}",
        acc["int8+sparse50"]
    );
    ensure!(
        acc["gm30"] >= fp32 - E2E_PRUNE_DROP,
        "gm30 {} vs fp32 {fp32}",
        acc["gm30"]
    );
    Ok(details.join(", "))
}

// ---------------------------------------------------------------------------

fn round_trip() -> Outcome {
    let dir = tempfile::tempdir()?;
    let x = {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        Tensor::from_fn(&[100, 1, 8, 8], |_| rng.gen_range(-1.0..1.5))
    };
    let configs = [
        ("int8+sparse50", INT8_SPARSE),
        ("gm30", GM30),
        (
            "asymmetric",
            r#"{"algorithms": [{"quantization": {"mode": "asymmetric", "bits": 4, "per_channel": true}}]}"#,
        ),
        (
            "binarized",
            r#"{"algorithms": [{"binarization": {"stage_epochs": [1, 1, 1, 1]}}]}"#,
        ),
    ];
    let mut worst: f64 = 0.0;
    for (i, (name, cfg)) in configs.iter().enumerate() {
        let (first, _) = train(cfg, 200, 4)?;
        let exported = first.model.export()?;
        let path = dir.path().join(format!("model{i}.sqzm"));
        squeeze::graph::save_model(&exported, &path)?;
        let loaded = load_model(&path)?;
        let d = max_diff(
            &run_graph(&first.model.graph, &x, Mode::Eval)?,
            &run_graph(&loaded, &x, Mode::Eval)?,
        );
        ensure!(d <= EQUIV_ABS, "{name}: reloaded export differs by {d:e}");
        worst = worst.max(d);

        // Same seed again, once without threads: identical records and bytes.
        set_execution_mode(ExecutionMode::Sequential);
        let second = train(cfg, 200, 4);
        set_execution_mode(ExecutionMode::Parallel);
        let (second, _) = second?;
        ensure!(first.records == second.records, "{name}: metrics differ between runs");
        let a = serialize_model(&exported)?.to_bytes();
        let b = serialize_model(&second.model.export()?)?.to_bytes();
        ensure!(a == b, "{name}: exported bytes differ between runs");
    }
    Ok(format!(
        "{} configs reload within {worst:e}; repeated runs bit-identical",
        configs.len()
    ))
}
