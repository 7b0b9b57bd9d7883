//! Bit-width assignment from layer sensitivities.

use serde::{Deserialize, Serialize};

use super::{fake_quant_asymmetric, fake_quant_symmetric, QuantMode, QuantizerSpec, RANGE_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the compression ratio is compared with the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioRule {
    /// Feasible when the ratio is at least the threshold.
    #[default]
    AtLeast,
    /// Feasible when the ratio is at most the threshold.
    AtMost,
}

impl RatioRule {
    fn admits(self, ratio: f64, threshold: f64) -> bool {
        match self {
            RatioRule::AtLeast => ratio >= threshold,
            RatioRule::AtMost => ratio <= threshold,
        }
    }
}

/// Per-layer inputs to the search.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCandidate {
    pub name: String,
    pub avg_trace: f64,
    pub flops: f64,
    /// `(bits, ||Q_bits(W) - W||^2)` for every candidate bit-width.
    pub perturbations: Vec<(u32, f64)>,
}

impl LayerCandidate {
    /// Quantizes `weight` at each candidate width with a range taken from the
    /// weight itself.
    pub fn from_weight(
        name: &str,
        avg_trace: f64,
        flops: f64,
        weight: &Tensor,
        spec: &QuantizerSpec,
        bits: &[u32],
    ) -> Result<Self> {
        let perturbations = bits
            .iter()
            .map(|&b| Ok((b, perturbation(weight, &QuantizerSpec { bits: b, ..*spec })?)))
            .collect::<Result<_>>()?;
        Ok(LayerCandidate {
            name: name.to_string(),
            avg_trace,
            flops,
            perturbations,
        })
    }

    fn perturbation_at(&self, bits: u32) -> Result<f64> {
        self.perturbations
            .iter()
            .find(|(b, _)| *b == bits)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::InvalidArgument(format!("no {bits}-bit perturbation for `{}`", self.name)))
    }
}

fn perturbation(w: &Tensor, spec: &QuantizerSpec) -> Result<f64> {
    let channels = if spec.per_channel { w.shape()[0] } else { 1 };
    let per = w.len() / channels;
    let q = match spec.mode {
        QuantMode::Symmetric => {
            let scale: Vec<f64> = w
                .data()
                .chunks(per)
                .map(|c| c.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(RANGE_FLOOR))
                .collect();
            fake_quant_symmetric(w, &Tensor::new(vec![channels], scale)?, spec.bits, spec.role)?
        }
        QuantMode::Asymmetric => {
            let mut lo = Vec::with_capacity(channels);
            let mut hi = Vec::with_capacity(channels);
            for c in w.data().chunks(per) {
                let l = c.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
                let h = c.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
                lo.push(l);
                hi.push(if h > l { h } else { l + RANGE_FLOOR });
            }
            fake_quant_asymmetric(
                w,
                &Tensor::new(vec![channels], lo)?,
                &Tensor::new(vec![channels], hi)?,
                spec.bits,
            )?
        }
    };
    Ok(q.data().iter().zip(w.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Average Hessian trace times the squared L2 norm of the weight
/// quantization perturbation at `spec.bits`.
pub fn layer_sensitivity(avg_trace: f64, w: &Tensor, spec: &QuantizerSpec) -> Result<f64> {
    Ok(avg_trace * perturbation(w, spec)?)
}

pub fn bit_complexity(flops: &[f64], bits: &[u32]) -> f64 {
    flops.iter().zip(bits).map(|(f, &b)| f * b as f64).sum()
}

/// All-8-bit complexity over the assignment's complexity.
pub fn compression_ratio(flops: &[f64], bits: &[u32]) -> f64 {
    let int8: f64 = flops.iter().map(|f| f * 8.0).sum();
    int8 / bit_complexity(flops, bits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPrecisionPlan {
    pub layers: Vec<String>,
    pub bits: Vec<u32>,
    pub avg_traces: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub metric: f64,
    pub bit_complexity: f64,
    pub compression_ratio: f64,
}

/// Groups of layer indices with equal trace, in increasing trace order.
fn trace_groups(layers: &[LayerCandidate]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| layers[a].avg_trace.total_cmp(&layers[b].avg_trace).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if layers[g[0]].avg_trace == layers[i].avg_trace => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Calls `visit` with every assignment in which a layer with a strictly
/// smaller trace never gets more bits than one with a larger trace.
pub(crate) fn for_each_monotone(layers: &[LayerCandidate], candidates: &[u32], mut visit: impl FnMut(&[u32])) {
    let groups = trace_groups(layers);
    let members: Vec<usize> = groups.iter().flatten().copied().collect();
    let group_end: Vec<bool> = groups
        .iter()
        .flat_map(|g| (0..g.len()).map(move |k| k + 1 == g.len()))
        .collect();
    let mut bits = vec![0u32; layers.len()];
    #[allow(clippy::too_many_arguments)]
    fn rec(
        pos: usize,
        floor: u32,
        group_max: u32,
        members: &[usize],
        group_end: &[bool],
        candidates: &[u32],
        bits: &mut Vec<u32>,
        visit: &mut dyn FnMut(&[u32]),
    ) {
        if pos == members.len() {
            visit(bits);
            return;
        }
        for &b in candidates.iter().filter(|&&b| b >= floor) {
            bits[members[pos]] = b;
            let gm = group_max.max(b);
            let (next_floor, next_max) = if group_end[pos] { (gm, 0) } else { (floor, gm) };
            rec(
                pos + 1,
                next_floor,
                next_max,
                members,
                group_end,
                candidates,
                bits,
                visit,
            );
        }
    }
    rec(0, 0, 0, &members, &group_end, candidates, &mut bits, &mut visit);
}

/// Minimum-metric assignment among trace-monotone configurations that
/// satisfy the ratio rule. Ties prefer the higher bit complexity, then the
/// lexicographically larger assignment.
pub fn select_bitwidth_config(
    layers: &[LayerCandidate],
    candidate_bits: &[u32],
    ratio_threshold: f64,
    rule: RatioRule,
) -> Result<MixedPrecisionPlan> {
    if layers.is_empty() {
        return Err(Error::NoFeasibleConfig("no layers to assign".into()));
    }
    if let Some(l) = layers.iter().find(|l| !l.avg_trace.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite trace for `{}`", l.name)));
    }
    let mut candidates = candidate_bits.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let flops: Vec<f64> = layers.iter().map(|l| l.flops).collect();
    let mut sens = Vec::with_capacity(layers.len());
    for l in layers {
        let row = candidates
            .iter()
            .map(|&b| Ok(l.avg_trace * l.perturbation_at(b)?))
            .collect::<Result<Vec<f64>>>()?;
        sens.push(row);
    }
    let col = |b: u32| candidates.iter().position(|&c| c == b).expect("candidate");

    let mut best: Option<(f64, f64, Vec<u32>)> = None;
    for_each_monotone(layers, &candidates, |bits| {
        let ratio = compression_ratio(&flops, bits);
        if !rule.admits(ratio, ratio_threshold) {
            return;
        }
        let metric: f64 = bits.iter().enumerate().map(|(i, &b)| sens[i][col(b)]).sum();
        let complexity = bit_complexity(&flops, bits);
        let better = match &best {
            None => true,
            Some((m, c, bb)) => {
                metric < *m || (metric == *m && (complexity > *c || (complexity == *c && bits > bb.as_slice())))
            }
        };
        if better {
            best = Some((metric, complexity, bits.to_vec()));
        }
    });
    let (metric, complexity, bits) = best.ok_or_else(|| {
        Error::NoFeasibleConfig(format!(
            "no monotone assignment satisfies ratio {rule:?} {ratio_threshold}"
        ))
    })?;
    Ok(MixedPrecisionPlan {
        layers: layers.iter().map(|l| l.name.clone()).collect(),
        sensitivities: bits.iter().enumerate().map(|(i, &b)| sens[i][col(b)]).collect(),
        avg_traces: layers.iter().map(|l| l.avg_trace).collect(),
        compression_ratio: compression_ratio(&flops, &bits),
        bits,
        metric,
        bit_complexity: complexity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::QuantRole;

    fn layer(name: &str, trace: f64, flops: f64, p4: f64, p8: f64) -> LayerCandidate {
        LayerCandidate {
            name: name.into(),
            avg_trace: trace,
            flops,
            perturbations: vec![(4, p4), (8, p8)],
        }
    }

    #[test]
    fn monotone_space_of_two_layers() {
        let layers = [layer("a", 0.1, 1.0, 1.0, 0.0), layer("b", 10.0, 1.0, 1.0, 0.0)];
        let mut seen = Vec::new();
        for_each_monotone(&layers, &[4, 8], |b| seen.push(b.to_vec()));
        seen.sort();
        assert_eq!(seen, vec![vec![4, 4], vec![4, 8], vec![8, 8]]);
    }

    #[test]
    fn equal_traces_are_unconstrained() {
        let layers = [layer("a", 1.0, 1.0, 1.0, 0.0), layer("b", 1.0, 1.0, 1.0, 0.0)];
        let mut n = 0;
        for_each_monotone(&layers, &[4, 8], |_| n += 1);
        assert_eq!(n, 4);
    }

    #[test]
    fn picks_low_bits_on_flat_layer() {
        // Ratio 1.33 needs one 4-bit layer; the low-trace one is cheaper.
        let layers = [layer("a", 0.1, 1.0, 1.0, 0.0), layer("b", 10.0, 1.0, 1.0, 0.0)];
        let plan = select_bitwidth_config(&layers, &[4, 8], 1.3, RatioRule::AtLeast).unwrap();
        assert_eq!(plan.bits, vec![4, 8]);
        assert!((plan.metric - 0.1).abs() < 1e-15);
        assert!((plan.compression_ratio - 16.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_one_admits_all_eight() {
        let layers = [layer("a", 1.0, 3.0, 0.0, 0.0), layer("b", 1.0, 5.0, 0.0, 0.0)];
        let plan = select_bitwidth_config(&layers, &[4, 8], 1.0, RatioRule::AtMost).unwrap();
        assert_eq!(plan.bits, vec![8, 8]);
        assert_eq!(plan.compression_ratio, 1.0);
        let plan = select_bitwidth_config(&layers, &[4, 8], 1.0, RatioRule::AtLeast).unwrap();
        assert_eq!(plan.bits, vec![8, 8], "zero-perturbation tie goes to higher bits");
    }

    #[test]
    fn infeasible_threshold_errors() {
        let layers = [layer("a", 1.0, 1.0, 1.0, 0.0)];
        assert!(matches!(
            select_bitwidth_config(&layers, &[4, 8], 3.0, RatioRule::AtLeast),
            Err(Error::NoFeasibleConfig(_))
        ));
    }

    #[test]
    fn sensitivity_examples() {
        let spec = QuantizerSpec {
            mode: QuantMode::Symmetric,
            bits: 8,
            role: QuantRole::Weights,
            per_channel: false,
        };
        // On-grid weights: max 1.27 gives step 0.01.
        let w = Tensor::new(vec![3], vec![1.27, -0.5, 0.03]).unwrap();
        assert!(layer_sensitivity(5.0, &w, &spec).unwrap() < 1e-28);
        let w = Tensor::new(vec![2], vec![1.0, 0.3]).unwrap();
        assert_eq!(
            layer_sensitivity(0.0, &w, &QuantizerSpec { bits: 2, ..spec }).unwrap(),
            0.0
        );
        // 2-bit: levels {-1, 0, 1}; 0.3 -> 0, perturbation 0.09.
        let s = layer_sensitivity(2.0, &w, &QuantizerSpec { bits: 2, ..spec }).unwrap();
        assert!((s - 0.18).abs() < 1e-15);
    }
}
