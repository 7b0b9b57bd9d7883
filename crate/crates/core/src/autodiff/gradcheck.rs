//! Central finite-difference gradient checking.
//!
//! Only the forward values of the tape are used here, so the check stays
//! independent of the backward rules it validates.

use rand::Rng;

use super::{Tape, Var};
use crate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// `|analytic - numeric| / max(1, |numeric|)`, maximised over entries.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Uniform entries in `[-2, 2]`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..=2.0))
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Numerical gradient of the scalar built by `build` with respect to every
/// input entry, by central differences with step `h`.
pub fn numeric_gradients<F>(inputs: &[Tensor], build: &F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Compares tape gradients against central finite differences.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let numeric = numeric_gradients(inputs, &build, h);

    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        checked: 0,
    };
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = grads.wrt(*v);
        for (&a, &n) in analytic.data().iter().zip(num) {
            let abs = (a - n).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(abs / n.abs().max(1.0));
            report.checked += 1;
        }
    }
    report
}
