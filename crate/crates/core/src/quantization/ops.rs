//! Fake-quantization operators with custom gradients for the tape.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    asym_scalar, levels_minus_one, quant_range_for, slice_len, sym_scalar, tune_with_case, QuantRole, TuneCase,
    TunedRange, RANGE_FLOOR,
};
use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Derivative used for the symmetric scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleGradient {
    /// Derivative of the forward function itself, holding the rounded level
    /// fixed: `round(clamp(v)) / q_max`.
    #[default]
    Exact,
    /// Learned-step-size style: `(round(v) - v) / q_max` inside the range,
    /// the clamp level ratio outside.
    Lsq,
}

/// Inputs: `[r, scale]` with `scale` of length 1 or one per axis-0 slice.
#[derive(Debug)]
pub struct SymmetricFakeQuant {
    qmin: f64,
    qmax: f64,
    gradient: ScaleGradient,
}

impl SymmetricFakeQuant {
    pub fn new(bits: u32, role: QuantRole, gradient: ScaleGradient) -> Result<Self> {
        let (qmin, qmax) = quant_range_for(bits, role)?;
        Ok(SymmetricFakeQuant {
            qmin: qmin as f64,
            qmax: qmax as f64,
            gradient,
        })
    }

    /// Records the quantize-dequantize of `r`. Scales below the floor are
    /// raised to it and receive no gradient.
    pub fn apply(self: Arc<Self>, tape: &mut Tape, r: Var, scale: Var) -> Result<Var> {
        let rv = tape.value(r);
        let sv = tape.value(scale);
        let per = slice_len(rv, sv.len())?;
        let data = rv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| sym_scalar(x, sv.data()[i / per].max(RANGE_FLOOR), self.qmin, self.qmax))
            .collect();
        let out = Tensor::new(rv.shape().to_vec(), data)?;
        Ok(tape.custom(&[r, scale], out, self))
    }
}

impl CustomOp for SymmetricFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quant_symmetric"
    }

    fn backward(&self, up: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (r, scale) = (inputs[0], inputs[1]);
        let per = slice_len(r, scale.len())?;
        let mut gr = vec![0.0; r.len()];
        let mut gs = vec![0.0; scale.len()];
        for (i, (&x, &u)) in r.data().iter().zip(up.data()).enumerate() {
            let c = i / per;
            let s = scale.data()[c].max(RANGE_FLOOR);
            let v = x * self.qmax / s;
            let inside = v >= self.qmin && v <= self.qmax;
            if inside {
                gr[i] = u;
            }
            let clamped = v.clamp(self.qmin, self.qmax);
            let d = match self.gradient {
                ScaleGradient::Exact => clamped.round_ties_even() / self.qmax,
                ScaleGradient::Lsq if inside => (v.round_ties_even() - v) / self.qmax,
                ScaleGradient::Lsq => clamped / self.qmax,
            };
            gs[c] += u * d;
        }
        for (g, &s) in gs.iter_mut().zip(scale.data()) {
            if s <= RANGE_FLOOR {
                *g = 0.0;
            }
        }
        Ok(vec![
            Some(Tensor::new(r.shape().to_vec(), gr)?),
            Some(Tensor::new(scale.shape().to_vec(), gs)?),
        ])
    }
}

/// Inputs: `[r, low, high]`, raw (untuned) bounds of length 1 or one per
/// axis-0 slice. Tuning happens inside the op so its gradient chains back to
/// the raw bounds.
#[derive(Debug)]
pub struct AsymmetricFakeQuant {
    bits: u32,
}

impl AsymmetricFakeQuant {
    pub fn new(bits: u32) -> Result<Self> {
        quant_range_for(bits, QuantRole::UnsignedAct)?;
        Ok(AsymmetricFakeQuant { bits })
    }

    pub fn apply(self: Arc<Self>, tape: &mut Tape, r: Var, low: Var, high: Var) -> Result<Var> {
        let (lo, hi) = (tape.value(low), tape.value(high));
        if lo.len() != hi.len() {
            return Err(Error::Quantizer("low and high bounds differ in length".into()));
        }
        let ranges: Vec<TunedRange> = lo
            .data()
            .iter()
            .zip(hi.data())
            .map(|(&l, &h)| tune_with_case(l, h, self.bits).0)
            .collect();
        let out = super::fake_quant_tuned(tape.value(r), &ranges, self.bits)?;
        Ok(tape.custom(&[r, low, high], out, self))
    }
}

impl CustomOp for AsymmetricFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quant_asymmetric"
    }

    fn backward(&self, up: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (r, low, high) = (inputs[0], inputs[1], inputs[2]);
        let per = slice_len(r, low.len())?;
        let levels = levels_minus_one(self.bits);
        let tuned: Vec<(TunedRange, TuneCase)> = low
            .data()
            .iter()
            .zip(high.data())
            .map(|(&l, &h)| tune_with_case(l, h, self.bits))
            .collect();
        let mut gr = vec![0.0; r.len()];
        // Gradients with respect to the tuned bounds.
        let mut g_lo = vec![0.0; low.len()];
        let mut g_hi = vec![0.0; low.len()];
        for (i, (&x, &u)) in r.data().iter().zip(up.data()).enumerate() {
            let c = i / per;
            let (range, _) = &tuned[c];
            if x < range.low {
                g_lo[c] += u;
            } else if x > range.high {
                g_hi[c] += u;
            } else {
                gr[i] = u;
                // out = s * (q - z) with q locally constant and
                // s = (high - low) / levels.
                let s = (range.high - range.low) / levels;
                let qz = (asym_scalar(x, range, levels) / s).round_ties_even();
                g_lo[c] -= u * qz / levels;
                g_hi[c] += u * qz / levels;
            }
        }
        // Chain through the tuning scheme to the raw bounds.
        let mut g_low_raw = vec![0.0; low.len()];
        let mut g_high_raw = vec![0.0; low.len()];
        for c in 0..low.len() {
            let (g_l1, g_h1) = match tuned[c].1 {
                TuneCase::Degenerate => (0.0, 0.0),
                TuneCase::Kept => {
                    let z = tuned[c].0.zero_point as f64;
                    (
                        if z == 0.0 { 0.0 } else { g_lo[c] },
                        if z == levels { 0.0 } else { g_hi[c] },
                    )
                }
                TuneCase::HighFromLow(t) => (g_lo[c] + t * g_hi[c], 0.0),
                TuneCase::LowFromHigh(t) => (0.0, g_lo[c] / t + g_hi[c]),
            };
            if low.data()[c] < 0.0 {
                g_low_raw[c] = g_l1;
            }
            if high.data()[c] > 0.0 {
                g_high_raw[c] = g_h1;
            }
        }
        Ok(vec![
            Some(Tensor::new(r.shape().to_vec(), gr)?),
            Some(Tensor::new(low.shape().to_vec(), g_low_raw)?),
            Some(Tensor::new(high.shape().to_vec(), g_high_raw)?),
        ])
    }
}

/// Asymmetric quantization with frozen, already tuned ranges (exported
/// models). Only the input receives a gradient.
#[derive(Debug)]
pub(crate) struct TunedFakeQuant {
    pub bits: u32,
    pub ranges: Vec<TunedRange>,
}

impl TunedFakeQuant {
    pub fn apply(self: Arc<Self>, tape: &mut Tape, r: Var) -> Result<Var> {
        let out = super::fake_quant_tuned(tape.value(r), &self.ranges, self.bits)?;
        Ok(tape.custom(&[r], out, self))
    }
}

impl CustomOp for TunedFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quant_tuned"
    }

    fn backward(&self, up: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let r = inputs[0];
        let per = slice_len(r, self.ranges.len())?;
        let g = r
            .data()
            .iter()
            .zip(up.data())
            .enumerate()
            .map(|(i, (&x, &u))| {
                let range = &self.ranges[i / per];
                if x >= range.low && x <= range.high {
                    u
                } else {
                    0.0
                }
            })
            .collect();
        Ok(vec![Some(Tensor::new(r.shape().to_vec(), g)?)])
    }
}
