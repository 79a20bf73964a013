//! Affine quantization parameters.
//!
//! A real value maps to `x_q = clamp(round(x / S) - Z, qmin, qmax)` and back
//! to `S * (x_q + Z)`. Rounding is half away from zero everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

/// Half-width used to widen a constant range `[c, c]`.
pub const WIDEN_EPS: f64 = 1e-8;

/// Integer range for `bits`: `[-2^(b-1), 2^(b-1)-1]` or `[0, 2^b-1]`.
pub fn quant_range(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
    pub qmin: i64,
    pub qmax: i64,
}

/// Scale and zero point for the clipping range `[alpha, beta]`.
///
/// `S = (beta - alpha) / (2^b - 1)` and `Z = round(alpha / S) - qmin`, so
/// `alpha` lands on `qmin`.
pub fn compute_qparams(alpha: f64, beta: f64, bits: u32, signed: bool) -> Result<QParams> {
    if !(2..=16).contains(&bits) {
        return Err(QuantError::Bits(bits));
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(QuantError::NonFiniteRange { alpha, beta });
    }
    if alpha > beta {
        return Err(QuantError::InvertedRange { alpha, beta });
    }
    let (mut a, mut b) = (alpha, beta);
    if a == b {
        a -= WIDEN_EPS;
        b += WIDEN_EPS;
    }
    let (qmin, qmax) = quant_range(bits, signed);
    let scale = (b - a) / (qmax - qmin) as f64;
    let shifted = (a / scale).round();
    // Z must be exactly representable for the round trip to hold.
    if !(scale > 0.0) || !scale.is_normal() || shifted.abs() > 2f64.powi(52) {
        return Err(QuantError::Degenerate { alpha, beta });
    }
    Ok(QParams {
        scale,
        zero_point: shifted as i64 - qmin,
        bits,
        qmin,
        qmax,
    })
}

impl QParams {
    pub fn is_signed(&self) -> bool {
        self.qmin < 0
    }

    pub fn quantize(&self, x: f64) -> i64 {
        let q = (x / self.scale).round() - self.zero_point as f64;
        q.clamp(self.qmin as f64, self.qmax as f64) as i64
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        self.scale * (q + self.zero_point) as f64
    }

    /// `dequantize(quantize(x))`.
    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// Real values representable without clamping.
    pub fn real_range(&self) -> (f64, f64) {
        (self.dequantize(self.qmin), self.dequantize(self.qmax))
    }

    pub fn quantize_slice(&self, xs: &[f32]) -> Vec<i32> {
        xs.iter().map(|&x| self.quantize(x as f64) as i32).collect()
    }

    pub fn dequantize_slice(&self, qs: &[i32]) -> Vec<f32> {
        qs.iter().map(|&q| self.dequantize(q as i64) as f32).collect()
    }
}

/// Per-tensor min/max parameters for a slice.
pub fn minmax_qparams(xs: &[f32], bits: u32, signed: bool) -> Result<QParams> {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if xs.is_empty() {
        return Err(QuantError::Shape {
            op: "minmax_qparams",
            msg: "empty tensor".into(),
        });
    }
    compute_qparams(lo, hi, bits, signed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(quant_range(8, true), (-128, 127));
        assert_eq!(quant_range(8, false), (0, 255));
        assert_eq!(quant_range(4, true), (-8, 7));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(compute_qparams(1.0, 0.0, 8, true), Err(QuantError::InvertedRange { .. })));
        assert!(matches!(compute_qparams(0.0, 1.0, 1, true), Err(QuantError::Bits(1))));
        assert!(matches!(compute_qparams(0.0, 1.0, 17, true), Err(QuantError::Bits(17))));
        assert!(compute_qparams(f64::NAN, 1.0, 8, true).is_err());
        assert!(matches!(compute_qparams(1e12, 1e12, 8, true), Err(QuantError::Degenerate { .. })));
    }

    #[test]
    fn half_away_from_zero() {
        let qp = compute_qparams(-1.0, 1.0, 8, true).unwrap();
        // -1 / S = -127.5 rounds to -128
        assert_eq!(qp.quantize(-1.0), -128);
        assert_eq!(qp.zero_point, 0);
    }
}
