//! Weight distribution shift.
//!
//! Every weight of a layer is shifted by a power-of-two `delta` before it is
//! loaded (saturating at `INTMAX`), which moves the small negative weights,
//! rich in set bits, onto small positives. The shift compensator undoes the
//! offset after the MAC: `W' x = W x + delta * sum(x)`, so adding
//! `-delta * sum(x)` restores the exact product whenever nothing saturated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{int_range, QuantizedTensor};

/// Overflow fraction above which [`ShiftedLayer::overflow_warning`] fires.
pub const OVERFLOW_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedLayer {
    pub base: QuantizedTensor,
    pub delta: u32,
    pub shifted: QuantizedTensor,
    pub clamped_count: usize,
}

impl ShiftedLayer {
    pub fn overflow_warning(&self) -> bool {
        self.clamped_count as f64 / self.base.len() as f64 > OVERFLOW_WARN_FRACTION
    }
}

pub fn check_delta(delta: u32, q: u8) -> Result<()> {
    if !delta.is_power_of_two() {
        return Err(Error::validation(format!("delta {delta} is not a power of two")));
    }
    if delta as i64 >= 1i64 << (q - 1) {
        return Err(Error::validation(format!("delta {delta} must be below 2^(q-1) for q={q}")));
    }
    Ok(())
}

pub fn shift_weights(t: &QuantizedTensor, delta: u32) -> Result<ShiftedLayer> {
    check_delta(delta, t.q())?;
    let (_, intmax) = int_range(t.q());
    let mut clamped_count = 0;
    let values = t
        .values()
        .iter()
        .map(|&v| {
            let s = v + delta as i32;
            if s > intmax {
                clamped_count += 1;
                intmax
            } else {
                s
            }
        })
        .collect();
    Ok(ShiftedLayer {
        base: t.clone(),
        delta,
        shifted: t.with_values(values)?,
        clamped_count,
    })
}

/// Dense row-major integer matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = i64> + '_ {
        (0..self.rows).map(move |r| self.at(r, c))
    }

    pub fn max_abs(&self) -> i64 {
        self.data.iter().map(|v| v.abs()).max().unwrap_or(0)
    }
}

/// `weights * input` with overflow detection. `weights` is `[m, k]`,
/// `input` is `[k, n]`.
pub fn matmul(weights: &QuantizedTensor, input: &IntMatrix) -> Result<IntMatrix> {
    let (m, k) = weights.dims2()?;
    if k != input.rows {
        return Err(Error::Shape(format!("[{m}, {k}] x [{}, {}]", input.rows, input.cols)));
    }
    let mut out = IntMatrix::zeros(m, input.cols);
    for r in 0..m {
        for c in 0..input.cols {
            let mut acc = 0i64;
            for i in 0..k {
                let p = (weights.at(r, i) as i64)
                    .checked_mul(input.at(i, c))
                    .ok_or(Error::Overflow("MAC"))?;
                acc = acc.checked_add(p).ok_or(Error::Overflow("MAC"))?;
            }
            out.data[r * input.cols + c] = acc;
        }
    }
    Ok(out)
}

/// Correction term for one input column: `-(sum of inputs) * delta`, with
/// the multiply done as a shift.
pub fn correction(input_sum: i64, delta: u32) -> Result<i64> {
    let shift = delta.trailing_zeros();
    let scaled = input_sum
        .checked_mul(1i64 << shift)
        .ok_or(Error::Overflow("correction"))?;
    scaled.checked_neg().ok_or(Error::Overflow("correction"))
}

/// Shifted product plus the broadcast per-column correction.
pub fn corrected_matmul(layer: &ShiftedLayer, input: &IntMatrix) -> Result<IntMatrix> {
    let mut out = matmul(&layer.shifted, input)?;
    for c in 0..input.cols {
        let sum = input
            .column(c)
            .try_fold(0i64, |a, v| a.checked_add(v))
            .ok_or(Error::Overflow("input sum"))?;
        let corr = correction(sum, layer.delta)?;
        for r in 0..out.rows {
            let cell = &mut out.data[r * out.cols + c];
            *cell = cell.checked_add(corr).ok_or(Error::Overflow("correction add"))?;
        }
    }
    Ok(out)
}

/// One-stage pipelined compensator: the correction for column `t` is latched
/// at cycle `t` and added to that column's MAC output at cycle `t + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompensatorState {
    pub delta: u32,
    /// MAC outputs of the previous column and their latched correction.
    pub pending: Option<(Vec<i64>, i64)>,
}

impl CompensatorState {
    pub fn new(delta: u32) -> Self {
        Self { delta, pending: None }
    }

    /// Advances one cycle. `column` is this cycle's MAC outputs (one per
    /// bank) and input sum, or `None` to drain. Returns the corrected outputs
    /// of the previous column, if there was one.
    pub fn step(&mut self, column: Option<(&[i64], i64)>) -> Option<Vec<i64>> {
        let emitted = self
            .pending
            .take()
            .map(|(mac, corr)| mac.into_iter().map(|v| v + corr).collect());
        if let Some((mac, sum)) = column {
            let corr = -(sum << self.delta.trailing_zeros());
            self.pending = Some((mac.to_vec(), corr));
        }
        emitted
    }
}

/// Free-function form of [`CompensatorState::step`].
pub fn pipeline_step(state: &mut CompensatorState, mac_out: &[i64], input_col_sum: i64) -> Option<Vec<i64>> {
    state.step(Some((mac_out, input_col_sum)))
}
