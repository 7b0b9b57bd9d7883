//! Randomized Hessian trace estimation by Hutchinson's method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ForwardContext, Mode, ModelGraph};
use crate::parallel::map_indices;
use crate::tensor::Tensor;

/// Samples per task; fixed so results do not depend on the thread count.
const GROUP: usize = 16;

/// `<v, Hv>` for every probe in `probes`, sharing one recorded gradient
/// graph.
fn quadratic_forms<F>(build: &F, probes: impl Iterator<Item = Vec<Tensor>>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::new();
    let (loss, wrt) = build(&mut tape)?;
    let grads = tape.grad_graph(loss, &wrt)?;
    let mark = tape.len();
    let mut out = Vec::new();
    for v in probes {
        let mut dot = None;
        for (g, vt) in grads.iter().zip(&v) {
            let vc = tape.constant(vt.clone());
            let p = tape.mul(*g, vc)?;
            let s = tape.sum(p);
            dot = Some(match dot {
                None => s,
                Some(d) => tape.add(d, s)?,
            });
        }
        let Some(dot) = dot else {
            out.push(0.0);
            continue;
        };
        let hv = tape.backward(dot)?;
        let q: f64 = wrt
            .iter()
            .zip(&v)
            .map(|(w, vt)| hv.wrt(*w).data().iter().zip(vt.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        out.push(q);
        tape.truncate(mark);
    }
    Ok(out)
}

fn rademacher(shapes: &[Vec<usize>], seed: u64, sample: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| if rng.gen::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}

/// Mean of `v^T H v` over `n_samples` Rademacher probes, where `H` is the
/// Hessian of the scalar built by `build` with respect to the variables it
/// returns. Probe `k` draws from stream `k` of a generator seeded by `seed`.
pub fn estimate_hessian_trace<F>(build: F, n_samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<(Var, Vec<Var>)> + Sync,
{
    if n_samples < 1 {
        return Err(Error::InvalidArgument(
            "Hutchinson estimation needs at least one sample".into(),
        ));
    }
    let shapes: Vec<Vec<usize>> = {
        let mut tape = Tape::new();
        let (_, wrt) = build(&mut tape)?;
        wrt.iter().map(|v| tape.shape(*v).to_vec()).collect()
    };
    let groups = n_samples.div_ceil(GROUP);
    let parts = map_indices(groups, |g| {
        let range = g * GROUP..((g + 1) * GROUP).min(n_samples);
        quadratic_forms(&build, range.map(|k| rademacher(&shapes, seed, k as u64)))
    });
    let mut total = 0.0;
    for p in parts {
        total += p?.iter().sum::<f64>();
    }
    Ok(total / n_samples as f64)
}

/// Exact trace through one Hessian-vector product per coordinate; meant as
/// an oracle on small problems.
pub fn exact_hessian_trace<F>(build: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<(Var, Vec<Var>)>,
{
    let shapes: Vec<Vec<usize>> = {
        let mut tape = Tape::new();
        let (_, wrt) = build(&mut tape)?;
        wrt.iter().map(|v| tape.shape(*v).to_vec()).collect()
    };
    let mut probes = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        for j in 0..s.iter().product::<usize>() {
            probes.push(
                shapes
                    .iter()
                    .enumerate()
                    .map(|(k, sk)| {
                        let mut t = Tensor::zeros(sk);
                        if k == i {
                            t.data_mut()[j] = 1.0;
                        }
                        t
                    })
                    .collect(),
            );
        }
    }
    Ok(quadratic_forms(&build, probes.into_iter())?.iter().sum())
}

/// Average Hessian trace (trace / parameter count) of the task loss with
/// respect to each listed layer's weight, evaluated in eval mode on one
/// calibration batch. Layer `i` uses seed `seed + i`.
pub fn layer_average_traces(
    graph: &ModelGraph,
    inputs: &Tensor,
    labels: &[usize],
    layers: &[String],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let results = map_indices(layers.len(), |i| -> Result<f64> {
        let weight = graph
            .node(&layers[i])?
            .param("weight")
            .ok_or_else(|| Error::Graph(format!("`{}` has no weight", layers[i])))?
            .clone();
        let numel = weight.read().len() as f64;
        let build = |tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
            let mut ctx = ForwardContext::new(Mode::Eval).with_grads(false);
            let w = ctx.param_with_grad(&weight);
            let x = ctx.tape.constant(inputs.clone());
            let logits = graph.forward(&mut ctx, x)?;
            let loss = crate::train::cross_entropy(&mut ctx.tape, logits, labels)?;
            *tape = std::mem::take(&mut ctx.tape);
            Ok((loss, vec![w]))
        };
        Ok(estimate_hessian_trace(build, n_samples, seed.wrapping_add(i as u64))? / numel)
    });
    results.into_iter().collect()
}
