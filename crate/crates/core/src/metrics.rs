//! Workload-to-IR-drop metrics.
//!
//! `R_tog` is the fraction of weight bits in a bank whose input line toggles
//! between two consecutive cycles. HR is the fraction of set bits in the
//! stored weights, and bounds `R_tog` from above: it is reached when every
//! input line toggles at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IrCoefficients;

/// Set bits in the q-bit two's-complement encoding of `v`. The sign bit
/// counts.
#[inline]
pub fn popcount(v: i32, q: u8) -> u32 {
    let mask = if q >= 32 { u32::MAX } else { (1u32 << q) - 1 };
    (v as u32 & mask).count_ones()
}

/// One toggle bit per cell line for a single cycle: entry `k` is
/// `I[k, t] XOR I[k, t + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitToggleFrame {
    pub toggles: Vec<bool>,
}

impl BitToggleFrame {
    pub fn new(toggles: Vec<bool>) -> Self {
        Self { toggles }
    }

    pub fn all(n: usize, on: bool) -> Self {
        Self { toggles: vec![on; n] }
    }

    pub fn len(&self) -> usize {
        self.toggles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.toggles.is_empty()
    }

    pub fn count(&self) -> usize {
        self.toggles.iter().filter(|&&t| t).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtogSample {
    pub value: f64,
    pub cycle: u64,
    pub bank: usize,
}

/// `R_tog` of one bank for one cycle.
pub fn rtog(bank_weights: &[i32], q: u8, frame: &BitToggleFrame) -> Result<f64> {
    if bank_weights.len() != frame.len() {
        return Err(Error::Length {
            expected: bank_weights.len(),
            actual: frame.len(),
        });
    }
    if bank_weights.is_empty() {
        return Err(Error::validation("bank has no cells"));
    }
    let hit: u64 = bank_weights
        .iter()
        .zip(&frame.toggles)
        .filter(|(_, &t)| t)
        .map(|(&w, _)| popcount(w, q) as u64)
        .sum();
    Ok(hit as f64 / (bank_weights.len() as f64 * q as f64))
}

/// Same as [`rtog`], tagged with where and when it was taken.
pub fn rtog_sample(bank_weights: &[i32], q: u8, frame: &BitToggleFrame, cycle: u64, bank: usize) -> Result<RtogSample> {
    Ok(RtogSample {
        value: rtog(bank_weights, q, frame)?,
        cycle,
        bank,
    })
}

/// Hamming count (`hm`) and rate (`hr`) of a weight slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hamming {
    pub hm: u64,
    pub hr: f64,
}

pub fn hamming(values: &[i32], q: u8) -> Result<Hamming> {
    if values.is_empty() {
        return Err(Error::validation("hamming of an empty slice"));
    }
    let hm: u64 = values.iter().map(|&v| popcount(v, q) as u64).sum();
    Ok(Hamming {
        hm,
        hr: hm as f64 / (values.len() as f64 * q as f64),
    })
}

/// Affine IR-drop estimate in volts: `static_drop + dynamic_slope * rtog`.
pub fn ir_drop_estimate(rtog: f64, coeffs: &IrCoefficients) -> Result<f64> {
    if !(0.0..=1.0).contains(&rtog) {
        return Err(Error::validation(format!("rtog {rtog} outside [0, 1]")));
    }
    Ok(coeffs.static_drop + coeffs.dynamic_slope * rtog)
}

/// Macro-level `R_tog`: the mean over its banks.
pub fn macro_rtog(bank_rtogs: &[f64]) -> f64 {
    if bank_rtogs.is_empty() {
        return 0.0;
    }
    bank_rtogs.iter().sum::<f64>() / bank_rtogs.len() as f64
}
