//! Differentiable Hamming rate and the HR regulariser.
//!
//! A float weight `w` with scale `s` sits between the integers
//! `floor(w / s)` and `ceil(w / s)`; its HR is the linear interpolation of
//! their HRs and its gradient is the slope of that segment. Gradients are
//! returned as `dHR/dw`; descent moves against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{hamming, popcount};
use crate::model::{int_range, QuantizedTensor};

/// HR of every representable q-bit integer.
#[derive(Debug, Clone, PartialEq)]
pub struct HrLookup {
    q: u8,
    min: i32,
    table: Vec<f64>,
}

impl HrLookup {
    pub fn new(q: u8) -> Result<Self> {
        if q == 0 || q > crate::model::MAX_Q {
            return Err(Error::validation(format!("unsupported q={q}")));
        }
        let (min, max) = int_range(q);
        let table = (min..=max).map(|v| popcount(v, q) as f64 / q as f64).collect();
        Ok(Self { q, min, table })
    }

    pub fn q(&self) -> u8 {
        self.q
    }

    pub fn range(&self) -> (i32, i32) {
        (self.min, self.min + self.table.len() as i32 - 1)
    }

    /// HR of integer `v`. Panics outside the representable range.
    pub fn hr(&self, v: i32) -> f64 {
        self.table[(v - self.min) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpHr {
    pub hr: f64,
    /// `dHR/dw`.
    pub grad: f64,
    /// `w / s` fell outside the representable range and was clamped.
    pub clamped: bool,
}

pub fn interp_hr(w: f64, scale: f64, lut: &HrLookup) -> Result<InterpHr> {
    if !(scale > 0.0) {
        return Err(Error::validation(format!("scale must be positive, got {scale}")));
    }
    let x = w / scale;
    let (min, max) = lut.range();
    if x <= min as f64 || x >= max as f64 {
        let v = if x <= min as f64 { min } else { max };
        return Ok(InterpHr {
            hr: lut.hr(v),
            grad: 0.0,
            clamped: x < min as f64 || x > max as f64,
        });
    }
    let low = x.floor();
    let high = x.ceil();
    let (hl, hh) = (lut.hr(low as i32), lut.hr(high as i32));
    if low == high {
        return Ok(InterpHr {
            hr: hl,
            grad: 0.0,
            clamped: false,
        });
    }
    let p = x - low;
    Ok(InterpHr {
        hr: (1.0 - p) * hl + p * hh,
        grad: (hh - hl) / scale,
        clamped: false,
    })
}

/// A layer of float weights sharing one quantization scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatWeightLayer {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub weights: Vec<f64>,
    pub scale: f64,
    #[serde(default = "d_q")]
    pub q: u8,
}

fn d_q() -> u8 {
    8
}

impl FloatWeightLayer {
    pub fn new(id: impl Into<String>, weights: Vec<f64>, scale: f64, q: u8) -> Result<Self> {
        let l = Self {
            id: id.into(),
            weights,
            scale,
            q,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::validation(format!("layer {}: scale must be positive", self.id)));
        }
        if self.weights.is_empty() {
            return Err(Error::validation(format!("layer {}: empty", self.id)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation(format!("layer {}: non-finite weight", self.id)));
        }
        Ok(())
    }

    /// Round-to-nearest quantization with clipping.
    pub fn quantize(&self) -> Result<QuantizedTensor> {
        let (min, max) = int_range(self.q);
        let values = self
            .weights
            .iter()
            .map(|w| ((w / self.scale).round() as i64).clamp(min as i64, max as i64) as i32)
            .collect();
        QuantizedTensor::new(vec![self.weights.len()], self.q, self.scale, values)
    }

    /// HR after quantization.
    pub fn quantized_hr(&self) -> Result<f64> {
        let t = self.quantize()?;
        Ok(hamming(t.values(), t.q())?.hr)
    }

    /// Mean interpolated HR.
    pub fn mean_hr(&self, lut: &HrLookup) -> Result<f64> {
        let mut sum = 0.0;
        for &w in &self.weights {
            sum += interp_hr(w, self.scale, lut)?.hr;
        }
        Ok(sum / self.weights.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LhrLoss {
    pub loss: f64,
    /// `dL/dw`, one vector per layer.
    pub grads: Vec<Vec<f64>>,
    /// Weights that were clamped to the representable range.
    pub clamped: usize,
}

/// Sum over layers of the squared mean interpolated HR.
pub fn lhr_loss(layers: &[FloatWeightLayer], lut: &HrLookup) -> Result<LhrLoss> {
    if layers.is_empty() {
        return Err(Error::validation("lhr_loss needs at least one layer"));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    let mut clamped = 0;
    for layer in layers {
        layer.validate()?;
        if layer.q != lut.q() {
            return Err(Error::validation(format!("layer {}: q={} but lookup q={}", layer.id, layer.q, lut.q())));
        }
        let n = layer.weights.len() as f64;
        let mut hr_sum = 0.0;
        let mut slopes = Vec::with_capacity(layer.weights.len());
        for &w in &layer.weights {
            let i = interp_hr(w, layer.scale, lut)?;
            hr_sum += i.hr;
            clamped += i.clamped as usize;
            slopes.push(i.grad);
        }
        let mean = hr_sum / n;
        loss += mean * mean;
        grads.push(slopes.into_iter().map(|g| 2.0 * mean * g / n).collect());
    }
    Ok(LhrLoss { loss, grads, clamped })
}

/// Stand-in for the task loss during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    None,
    /// `strength * ||w - w0||^2` against the starting weights.
    Quadratic { strength: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub anchor: Anchor,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub layers: Vec<FloatWeightLayer>,
    /// Post-quantization HR per layer, before and after.
    pub hr_before: Vec<f64>,
    pub hr_after: Vec<f64>,
    pub final_loss: f64,
    pub steps_run: usize,
    pub clamped_warnings: usize,
}

/// Consecutive loss increases tolerated before aborting.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// Gradient descent on `lambda * L_HR + anchor`.
///
/// A step never carries a weight across an integer lattice point: it stops
/// on the point instead, so on the piecewise-linear HR landscape each step
/// stays on one segment.
pub fn finetune(layers: &[FloatWeightLayer], lut: &HrLookup, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    if !(cfg.lambda >= 0.0) || !(cfg.lr > 0.0) {
        return Err(Error::validation("finetune needs lambda >= 0 and lr > 0"));
    }
    let hr_before = layers.iter().map(|l| l.quantized_hr()).collect::<Result<Vec<_>>>()?;
    let anchors: Vec<Vec<f64>> = layers.iter().map(|l| l.weights.clone()).collect();
    let mut cur = layers.to_vec();

    let total_loss = |cur: &[FloatWeightLayer], hr_loss: f64| -> f64 {
        let anchor = match cfg.anchor {
            Anchor::None => 0.0,
            Anchor::Quadratic { strength } => {
                strength
                    * cur
                        .iter()
                        .zip(&anchors)
                        .flat_map(|(l, a)| l.weights.iter().zip(a).map(|(w, w0)| (w - w0).powi(2)))
                        .sum::<f64>()
            }
        };
        cfg.lambda * hr_loss + anchor
    };

    let mut eval = lhr_loss(&cur, lut)?;
    let mut loss = total_loss(&cur, eval.loss);
    let mut rising = 0;
    let mut clamped_warnings = eval.clamped;
    let mut steps_run = 0;
    for _ in 0..cfg.steps {
        let mut moved = false;
        for (li, layer) in cur.iter_mut().enumerate() {
            let s = layer.scale;
            for (wi, w) in layer.weights.iter_mut().enumerate() {
                let mut g = cfg.lambda * eval.grads[li][wi];
                if let Anchor::Quadratic { strength } = cfg.anchor {
                    g += 2.0 * strength * (*w - anchors[li][wi]);
                }
                if g == 0.0 {
                    continue;
                }
                let x = *w / s;
                let target = x - cfg.lr * g / s;
                let (lo, hi) = if x.fract() == 0.0 { (x - 1.0, x + 1.0) } else { (x.floor(), x.ceil()) };
                let next = target.clamp(lo, hi) * s;
                moved |= next != *w;
                *w = next;
            }
        }
        steps_run += 1;
        eval = lhr_loss(&cur, lut)?;
        clamped_warnings += eval.clamped;
        let next_loss = total_loss(&cur, eval.loss);
        if next_loss > loss {
            rising += 1;
            if rising >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence(rising));
            }
        } else {
            rising = 0;
        }
        loss = next_loss;
        if !moved {
            break;
        }
    }
    let hr_after = cur.iter().map(|l| l.quantized_hr()).collect::<Result<Vec<_>>>()?;
    Ok(FinetuneOutcome {
        layers: cur,
        hr_before,
        hr_after,
        final_loss: loss,
        steps_run,
        clamped_warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lut() -> HrLookup {
        HrLookup::new(8).unwrap()
    }

    #[test]
    fn lookup_endpoints() {
        let l = lut();
        assert_eq!(l.hr(0), 0.0);
        assert_eq!(l.hr(-1), 1.0);
        assert_eq!(l.hr(8), 0.125);
        assert_eq!(l.range(), (-128, 127));
    }

    #[test]
    fn lattice_point_has_zero_gradient() {
        let i = interp_hr(8.0, 1.0, &lut()).unwrap();
        assert_eq!(i.hr, 0.125);
        assert_eq!(i.grad, 0.0);
    }

    #[test]
    fn out_of_range_clamps() {
        let i = interp_hr(300.0, 1.0, &lut()).unwrap();
        assert!(i.clamped);
        assert_eq!(i.grad, 0.0);
        assert_eq!(i.hr, lut().hr(127));
        assert!(interp_hr(1.0, 0.0, &lut()).is_err());
    }

    #[test]
    fn loss_structure() {
        let zero = FloatWeightLayer::new("z", vec![0.0; 4], 1.0, 8).unwrap();
        let e = lhr_loss(&[zero], &lut()).unwrap();
        assert_eq!(e.loss, 0.0);
        assert!(e.grads[0].iter().all(|&g| g == 0.0));

        let l = FloatWeightLayer::new("a", vec![-0.62, 6.4, 3.3], 1.0, 8).unwrap();
        let one = lhr_loss(std::slice::from_ref(&l), &lut()).unwrap().loss;
        let two = lhr_loss(&[l.clone(), l], &lut()).unwrap().loss;
        assert!((two - 2.0 * one).abs() < 1e-15);
        assert!(lhr_loss(&[], &lut()).is_err());
    }

    #[test]
    fn single_weight_loss_matches_finite_difference() {
        let l = FloatWeightLayer::new("a", vec![-0.62], 1.0, 8).unwrap();
        let e = lhr_loss(&[l], &lut()).unwrap();
        assert!((e.loss - 0.3844).abs() < 1e-12);
        let h = 1e-6;
        let f = |w: f64| lhr_loss(&[FloatWeightLayer::new("a", vec![w], 1.0, 8).unwrap()], &lut()).unwrap().loss;
        let fd = (f(-0.62 + h) - f(-0.62 - h)) / (2.0 * h);
        assert!((e.grads[0][0] - fd).abs() < 1e-6, "{} vs {fd}", e.grads[0][0]);
        assert!((e.grads[0][0] + 1.24).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_returns_to_anchor() {
        let l = FloatWeightLayer::new("a", vec![-0.62, 6.4, 3.3], 1.0, 8).unwrap();
        let cfg = FinetuneConfig {
            lambda: 0.0,
            anchor: Anchor::Quadratic { strength: 1.0 },
            steps: 100,
            lr: 0.1,
        };
        let out = finetune(std::slice::from_ref(&l), &lut(), &cfg).unwrap();
        assert_eq!(out.layers[0].weights, l.weights);
        assert_eq!(out.hr_before, out.hr_after);
    }

    #[test]
    fn strong_regulariser_pulls_to_zero() {
        let l = FloatWeightLayer::new("a", vec![-0.62], 1.0, 8).unwrap();
        let cfg = FinetuneConfig {
            lambda: 100.0,
            anchor: Anchor::Quadratic { strength: 1.0 },
            steps: 5000,
            lr: 1e-3,
        };
        let out = finetune(&[l], &lut(), &cfg).unwrap();
        let w = out.layers[0].weights[0];
        // Stationary point of 100 * (-w)^2 + (w + 0.62)^2 is -0.62 / 101.
        assert!((w + 0.62 / 101.0).abs() < 1e-3, "w={w}");
        assert_eq!(out.layers[0].quantize().unwrap().values(), &[0]);
        assert_eq!(out.hr_before, vec![1.0]);
        assert_eq!(out.hr_after, vec![0.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let l = FloatWeightLayer::new("a", vec![1.0], 1.0, 8).unwrap();
        let cfg = FinetuneConfig { lambda: -1.0, anchor: Anchor::None, steps: 1, lr: 0.1 };
        assert!(finetune(&[l], &lut(), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn continuous_at_lattice(v in -127i32..127) {
            let l = lut();
            let eps = 1e-9;
            let left = interp_hr(v as f64 - eps, 1.0, &l).unwrap().hr;
            let right = interp_hr(v as f64 + eps, 1.0, &l).unwrap().hr;
            prop_assert!((left - l.hr(v)).abs() < 1e-8);
            prop_assert!((right - l.hr(v)).abs() < 1e-8);
            prop_assert_eq!(interp_hr(v as f64, 1.0, &l).unwrap().hr, l.hr(v));
        }

        #[test]
        fn hr_in_unit_interval(w in -1000.0..1000.0f64, s in 0.01..10.0f64) {
            let i = interp_hr(w, s, &lut()).unwrap();
            prop_assert!((0.0..=1.0).contains(&i.hr));
        }

        #[test]
        fn pure_regulariser_never_raises_mean_hr(
            ws in prop::collection::vec(-100.0..100.0f64, 1..40),
            lambda in 0.1..50.0f64,
            lr in 0.001..0.5f64,
        ) {
            let l = lut();
            let layer = FloatWeightLayer::new("p", ws, 1.0, 8).unwrap();
            let mut prev = layer.mean_hr(&l).unwrap();
            let mut cur = vec![layer];
            for _ in 0..20 {
                let cfg = FinetuneConfig { lambda, anchor: Anchor::None, steps: 1, lr };
                cur = finetune(&cur, &l, &cfg).unwrap().layers;
                let m = cur[0].mean_hr(&l).unwrap();
                prop_assert!(m <= prev + 1e-12, "{} > {}", m, prev);
                prev = m;
            }
        }
    }
}
