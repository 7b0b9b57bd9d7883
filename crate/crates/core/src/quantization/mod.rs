//! Fake quantization, range tuning, automatic quantizer insertion and
//! Hessian-guided mixed precision.

mod hessian;
mod mixed;
mod ops;
mod quantizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use hessian::{estimate_hessian_trace, exact_hessian_trace, layer_average_traces};
pub use mixed::{
    bit_complexity, compression_ratio, layer_sensitivity, select_bitwidth_config, LayerCandidate, MixedPrecisionPlan,
    RatioRule,
};
pub use ops::{AsymmetricFakeQuant, ScaleGradient, SymmetricFakeQuant};
pub(crate) use quantizer::exported_fake_quant;
pub use quantizer::{
    initialize_quantizer_ranges, insert_quantizers, InsertionPolicy, QuantizerHandle, QuantizerKind, RangeParams,
};

/// Smallest admissible symmetric scale; also the width of a degenerate
/// all-zero asymmetric range.
pub const RANGE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantRole {
    Weights,
    SignedAct,
    UnsignedAct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub mode: QuantMode,
    pub bits: u32,
    pub role: QuantRole,
    /// One range per slice along axis 0 (weights only).
    pub per_channel: bool,
}

impl QuantizerSpec {
    /// Integer grid `(q_min, q_max)`; asymmetric quantizers always use
    /// `[0, 2^bits - 1]`.
    pub fn levels(&self) -> Result<(i64, i64)> {
        match self.mode {
            QuantMode::Symmetric => quant_range_for(self.bits, self.role),
            QuantMode::Asymmetric => quant_range_for(self.bits, QuantRole::UnsignedAct),
        }
    }
}

/// Integer range of the symmetric scheme for a bit-width and tensor role.
pub fn quant_range_for(bits: u32, role: QuantRole) -> Result<(i64, i64)> {
    if !(2..=32).contains(&bits) {
        return Err(Error::Quantizer(format!("bit-width must be in 2..=32, got {bits}")));
    }
    let half = 1i64 << (bits - 1);
    Ok(match role {
        QuantRole::Weights => (-half + 1, half - 1),
        QuantRole::SignedAct => (-half, half - 1),
        QuantRole::UnsignedAct => (0, (1i64 << bits) - 1),
    })
}

/// Result of zero-point range tuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TunedRange {
    pub low: f64,
    pub high: f64,
    pub zero_point: i64,
}

impl TunedRange {
    pub fn step(&self, bits: u32) -> f64 {
        (self.high - self.low) / levels_minus_one(bits)
    }
}

fn levels_minus_one(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

/// Which branch of the tuning scheme produced a range; used to chain
/// gradients from the tuned bounds back to the raw ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum TuneCase {
    Degenerate,
    Kept,
    /// `high` rescaled from `low` by the factor.
    HighFromLow(f64),
    /// `low` rescaled from `high` by the factor's inverse.
    LowFromHigh(f64),
}

pub(crate) fn tune_with_case(r_min: f64, r_max: f64, bits: u32) -> (TunedRange, TuneCase) {
    let l1 = r_min.min(0.0);
    let h1 = r_max.max(0.0);
    if h1 - l1 <= 0.0 {
        return (
            TunedRange {
                low: 0.0,
                high: RANGE_FLOOR,
                zero_point: 0,
            },
            TuneCase::Degenerate,
        );
    }
    let levels = levels_minus_one(bits);
    let z = (-l1 * levels / (h1 - l1)).round_ties_even();
    if z == 0.0 || z == levels {
        // The edge on the zero level snaps to exactly 0.
        return (
            TunedRange {
                low: if z == 0.0 { 0.0 } else { l1 },
                high: if z == levels { 0.0 } else { h1 },
                zero_point: z as i64,
            },
            TuneCase::Kept,
        );
    }
    let t = (z - levels) / z;
    let h2 = t * l1;
    let l2 = h1 / t;
    if h2 - l1 > h1 - l2 {
        (
            TunedRange {
                low: l1,
                high: h2,
                zero_point: z as i64,
            },
            TuneCase::HighFromLow(t),
        )
    } else {
        (
            TunedRange {
                low: l2,
                high: h1,
                zero_point: z as i64,
            },
            TuneCase::LowFromHigh(t),
        )
    }
}

/// Adjusts `[r_min, r_max]` so that zero lands exactly on an integer level.
pub fn tune_asymmetric_range(r_min: f64, r_max: f64, bits: u32) -> TunedRange {
    tune_with_case(r_min, r_max, bits).0
}

#[inline]
pub(crate) fn sym_scalar(r: f64, scale: f64, qmin: f64, qmax: f64) -> f64 {
    let v = (r * qmax / scale).clamp(qmin, qmax);
    v.round_ties_even() * scale / qmax
}

#[inline]
pub(crate) fn asym_scalar(r: f64, range: &TunedRange, levels: f64) -> f64 {
    let s = (range.high - range.low) / levels;
    let z = range.zero_point as f64;
    let q = (r.clamp(range.low, range.high) / s + z)
        .round_ties_even()
        .clamp(0.0, levels);
    s * (q - z)
}

/// Number of entries per range slice: `len` for per-tensor ranges, one
/// axis-0 slice otherwise.
pub(crate) fn slice_len(r: &Tensor, ranges: usize) -> Result<usize> {
    if ranges == 1 {
        return Ok(r.len());
    }
    if r.shape()[0] != ranges {
        return Err(Error::Quantizer(format!(
            "{ranges} per-channel ranges for tensor of shape {:?}",
            r.shape()
        )));
    }
    Ok(r.len() / ranges)
}

/// `s * round_even(clamp(r / s; q_min, q_max))` with `s = scale / q_max`,
/// slice-wise when `scale` has one entry per axis-0 slice.
pub fn fake_quant_symmetric(r: &Tensor, scale: &Tensor, bits: u32, role: QuantRole) -> Result<Tensor> {
    let (qmin, qmax) = quant_range_for(bits, role)?;
    if let Some(bad) = scale.data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Quantizer(format!("scale must be positive, got {bad}")));
    }
    let per = slice_len(r, scale.len())?;
    let out = r
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| sym_scalar(x, scale.data()[i / per], qmin as f64, qmax as f64))
        .collect();
    Tensor::new(r.shape().to_vec(), out)
}

/// Tunes each `[r_min, r_max]` pair and quantizes asymmetrically.
pub fn fake_quant_asymmetric(r: &Tensor, r_min: &Tensor, r_max: &Tensor, bits: u32) -> Result<Tensor> {
    quant_range_for(bits, QuantRole::UnsignedAct)?;
    if r_min.len() != r_max.len() {
        return Err(Error::Quantizer("r_min and r_max differ in length".into()));
    }
    for (lo, hi) in r_min.data().iter().zip(r_max.data()) {
        if !(hi > lo) {
            return Err(Error::Quantizer(format!("degenerate range [{lo}, {hi}]")));
        }
    }
    let ranges: Vec<TunedRange> = r_min
        .data()
        .iter()
        .zip(r_max.data())
        .map(|(&lo, &hi)| tune_asymmetric_range(lo, hi, bits))
        .collect();
    fake_quant_tuned(r, &ranges, bits)
}

pub(crate) fn fake_quant_tuned(r: &Tensor, ranges: &[TunedRange], bits: u32) -> Result<Tensor> {
    let per = slice_len(r, ranges.len())?;
    let levels = levels_minus_one(bits);
    let out = r
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| asym_scalar(x, &ranges[i / per], levels))
        .collect();
    Tensor::new(r.shape().to_vec(), out)
}
