//! Fixed-point quantization primitives.
//!
//! Every value in the model is an integer code with a power-of-two scale:
//! `value = code * 2^-n`. Weights and the generator's noise input are signed
//! codes in `[-2^n, 2^n]`; hidden activations are unsigned threshold counts
//! in `[0, 2^a - 1]`.

use serde::Serialize;
use thiserror::Error;

/// Largest bit width any quantizer in the model accepts.
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("input is not finite: {0}")]
    NonFinite(f64),
    #[error("bit width must be in 1..={MAX_BITS}, got {0}")]
    BitWidth(u8),
    #[error("element {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: Box<QuantError>,
    },
    #[error("tensor shape {shape:?} needs {expected} elements, got {found}")]
    ShapeMismatch {
        shape: Shape3,
        expected: usize,
        found: usize,
    },
    #[error("code {code} at index {index} outside the {scale_n}-bit range")]
    CodeRange { index: usize, code: i32, scale_n: u8 },
    #[error("threshold range [{lo}, {hi}] cannot hold {count} strictly ascending integers")]
    DegenerateRange { lo: i64, hi: i64, count: usize },
    #[error("thresholds must be strictly ascending (position {0})")]
    NotAscending(usize),
    #[error("threshold set for {out_bits} bits needs {expected} entries, got {found}")]
    ThresholdCount {
        out_bits: u8,
        expected: usize,
        found: usize,
    },
}

fn check_bits(n: u8) -> Result<(), QuantError> {
    if n == 0 || n > MAX_BITS {
        return Err(QuantError::BitWidth(n));
    }
    Ok(())
}

fn check_finite(x: f64) -> Result<(), QuantError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(QuantError::NonFinite(x))
    }
}

/// `2^n` as an integer code bound.
pub fn code_limit(n: u8) -> i32 {
    1i32 << n
}

/// A single fixed-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QScalar {
    pub code: i32,
    pub scale_n: u8,
}

impl QScalar {
    pub fn real_value(self) -> f64 {
        f64::from(self.code) / f64::from(code_limit(self.scale_n))
    }
}

/// Spatial shape of a feature map, `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of `(c, h, w)` in channel-fastest streaming order.
    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Integer-coded feature map. Codes are stored in `(h, w, c)` order, the
/// order in which pixels stream between layer engines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Shape3,
    codes: Vec<i32>,
    scale_n: u8,
}

impl QTensor {
    /// Builds a tensor, checking length and that every code lies in
    /// `[-2^n, 2^n]`.
    pub fn new(shape: Shape3, codes: Vec<i32>, scale_n: u8) -> Result<Self, QuantError> {
        check_bits(scale_n)?;
        if codes.len() != shape.len() {
            return Err(QuantError::ShapeMismatch {
                shape,
                expected: shape.len(),
                found: codes.len(),
            });
        }
        let lim = code_limit(scale_n);
        if let Some((index, &code)) = codes.iter().enumerate().find(|(_, c)| c.abs() > lim) {
            return Err(QuantError::CodeRange {
                index,
                code,
                scale_n,
            });
        }
        Ok(Self {
            shape,
            codes,
            scale_n,
        })
    }

    pub fn zeros(shape: Shape3, scale_n: u8) -> Result<Self, QuantError> {
        Self::new(shape, vec![0; shape.len()], scale_n)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn into_codes(self) -> Vec<i32> {
        self.codes
    }

    pub fn scale_n(&self) -> u8 {
        self.scale_n
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> i32 {
        self.codes[self.shape.index(c, h, w)]
    }

    pub fn real_values(&self) -> Vec<f64> {
        let lim = f64::from(code_limit(self.scale_n));
        self.codes.iter().map(|&c| f64::from(c) / lim).collect()
    }
}

/// Clamp to `[-1, 1]`.
pub fn hard_tanh(x: f64) -> Result<f64, QuantError> {
    check_finite(x)?;
    Ok(x.clamp(-1.0, 1.0))
}

/// `clip(round(x * 2^n), -2^n, 2^n)`, rounding half away from zero.
pub fn quantize(x: f64, n: u8) -> Result<QScalar, QuantError> {
    check_bits(n)?;
    check_finite(x)?;
    let lim = code_limit(n);
    let scaled = (x * f64::from(lim)).round();
    let code = scaled.clamp(-f64::from(lim), f64::from(lim)) as i32;
    Ok(QScalar { code, scale_n: n })
}

/// Elementwise [`quantize`] of a real tensor laid out in `(h, w, c)` order.
pub fn quantize_tensor(shape: Shape3, values: &[f64], n: u8) -> Result<QTensor, QuantError> {
    check_bits(n)?;
    if values.len() != shape.len() {
        return Err(QuantError::ShapeMismatch {
            shape,
            expected: shape.len(),
            found: values.len(),
        });
    }
    let codes = values
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            quantize(x, n).map(|q| q.code).map_err(|e| QuantError::Element {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    QTensor::new(shape, codes, n)
}

/// Straight-through estimator: the gradient passes where `|x| <= 1`.
pub fn ste_grad(g_q: f64, x: f64) -> Result<f64, QuantError> {
    check_finite(g_q)?;
    check_finite(x)?;
    Ok(if x.abs() <= 1.0 { g_q } else { 0.0 })
}

/// Ascending integer thresholds mapping an accumulator to an `out_bits`-bit
/// unsigned activation code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ThresholdSet {
    thresholds: Vec<i64>,
    out_bits: u8,
}

impl ThresholdSet {
    pub fn new(thresholds: Vec<i64>, out_bits: u8) -> Result<Self, QuantError> {
        check_bits(out_bits)?;
        let expected = (1usize << out_bits) - 1;
        if thresholds.len() != expected {
            return Err(QuantError::ThresholdCount {
                out_bits,
                expected,
                found: thresholds.len(),
            });
        }
        if let Some(i) = thresholds.windows(2).position(|w| w[0] >= w[1]) {
            return Err(QuantError::NotAscending(i + 1));
        }
        Ok(Self {
            thresholds,
            out_bits,
        })
    }

    pub fn thresholds(&self) -> &[i64] {
        &self.thresholds
    }

    pub fn out_bits(&self) -> u8 {
        self.out_bits
    }
}

/// Spreads `2^a - 1` thresholds uniformly over `[max(0, acc_min), acc_max]`.
///
/// Negative accumulators therefore map to code 0 (ReLU). Each ideal position
/// `lo + i * (hi - lo) / 2^a` is rounded half up; collisions after rounding are
/// bumped to one above their predecessor.
pub fn build_uniform_thresholds(
    acc_min: i64,
    acc_max: i64,
    out_bits: u8,
) -> Result<ThresholdSet, QuantError> {
    check_bits(out_bits)?;
    let count = (1usize << out_bits) - 1;
    let lo = acc_min.max(0);
    let hi = acc_max;
    if acc_min >= acc_max || hi < lo || ((hi - lo) as u128 + 1) < count as u128 {
        return Err(QuantError::DegenerateRange { lo, hi, count });
    }
    let bins = 1i128 << out_bits;
    let span = i128::from(hi - lo);
    let mut thresholds = Vec::with_capacity(count);
    let mut prev: Option<i64> = None;
    for i in 1..=count as i128 {
        // round(i * span / bins) for non-negative operands
        let offset = (2 * i * span + bins) / (2 * bins);
        let mut t = lo + offset as i64;
        if let Some(p) = prev {
            t = t.max(p + 1);
        }
        thresholds.push(t);
        prev = Some(t);
    }
    if thresholds.last().is_some_and(|&t| t > hi) {
        return Err(QuantError::DegenerateRange { lo, hi, count });
    }
    ThresholdSet::new(thresholds, out_bits)
}

/// Number of thresholds `<= acc`.
pub fn apply_thresholds(acc: i64, ts: &ThresholdSet) -> u32 {
    ts.thresholds.partition_point(|&t| t <= acc) as u32
}

/// Output stage of the last generator layer: rescale the accumulator by
/// `2^-shift`, clamp with hard-tanh and requantize to `out_bits`.
pub fn hardtanh_output_code(acc: i64, shift: u32, out_bits: u8) -> Result<i32, QuantError> {
    // exact for |acc| < 2^53, which the engine's accumulator bound guarantees
    let real = acc as f64 * (-f64::from(shift)).exp2();
    Ok(quantize(hard_tanh(real)?, out_bits)?.code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_tanh_examples() {
        assert_eq!(hard_tanh(0.5).unwrap(), 0.5);
        assert_eq!(hard_tanh(3.2).unwrap(), 1.0);
        assert_eq!(hard_tanh(-7.0).unwrap(), -1.0);
        assert!(hard_tanh(f64::NAN).is_err());
        assert!(hard_tanh(f64::INFINITY).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(0.3, 2).unwrap();
        assert_eq!((q.code, q.real_value()), (1, 0.25));
        let q = quantize(1.7, 3).unwrap();
        assert_eq!((q.code, q.real_value()), (8, 1.0));
        let q = quantize(-0.6, 1).unwrap();
        assert_eq!((q.code, q.real_value()), (-1, -0.5));
    }

    #[test]
    fn quantize_rejects_bad_input() {
        assert_eq!(quantize(0.1, 0), Err(QuantError::BitWidth(0)));
        assert!(matches!(quantize(f64::NAN, 4), Err(QuantError::NonFinite(_))));
    }

    #[test]
    fn quantize_ties_round_away_from_zero() {
        assert_eq!(quantize(0.125, 2).unwrap().code, 1);
        assert_eq!(quantize(-0.125, 2).unwrap().code, -1);
        assert_eq!(quantize(-1.0, 4).unwrap().code, -16);
    }

    #[test]
    fn quantize_tensor_cases() {
        let shape = Shape3::new(2, 2, 2);
        let t = quantize_tensor(shape, &[0.0; 8], 3).unwrap();
        assert!(t.codes().iter().all(|&c| c == 0));

        let grid: Vec<f64> = (-4..4).map(|k| f64::from(k) / 4.0).collect();
        let t = quantize_tensor(shape, &grid, 2).unwrap();
        assert_eq!(t.codes(), &[-4, -3, -2, -1, 0, 1, 2, 3]);

        let mut bad = vec![0.0; 8];
        bad[5] = f64::INFINITY;
        match quantize_tensor(shape, &bad, 2) {
            Err(QuantError::Element { index, .. }) => assert_eq!(index, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            quantize_tensor(shape, &[0.0; 7], 2),
            Err(QuantError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ste_examples() {
        assert_eq!(ste_grad(2.0, 0.5).unwrap(), 2.0);
        assert_eq!(ste_grad(2.0, 1.5).unwrap(), 0.0);
        assert_eq!(ste_grad(-3.0, -1.0).unwrap(), -3.0);
    }

    #[test]
    fn uniform_threshold_examples() {
        assert_eq!(build_uniform_thresholds(0, 8, 2).unwrap().thresholds(), &[2, 4, 6]);
        assert_eq!(build_uniform_thresholds(-8, 8, 1).unwrap().thresholds(), &[4]);
        // 0.75, 1.5, 2.25 round to 1, 2, 2; the collision bumps to 3
        assert_eq!(build_uniform_thresholds(0, 3, 2).unwrap().thresholds(), &[1, 2, 3]);
    }

    #[test]
    fn uniform_threshold_errors() {
        assert!(build_uniform_thresholds(5, 5, 1).is_err());
        assert!(build_uniform_thresholds(0, 1, 2).is_err());
        assert!(build_uniform_thresholds(-10, -2, 1).is_err());
        assert!(build_uniform_thresholds(0, 8, 0).is_err());
    }

    #[test]
    fn apply_threshold_examples() {
        let ts = ThresholdSet::new(vec![2, 4, 6], 2).unwrap();
        assert_eq!(apply_thresholds(5, &ts), 2);
        assert_eq!(apply_thresholds(-100, &ts), 0);
        assert_eq!(apply_thresholds(6, &ts), 3);
    }

    #[test]
    fn threshold_set_validation() {
        assert!(matches!(
            ThresholdSet::new(vec![1, 1, 2], 2),
            Err(QuantError::NotAscending(1))
        ));
        assert!(matches!(
            ThresholdSet::new(vec![1, 2], 2),
            Err(QuantError::ThresholdCount { .. })
        ));
    }

    #[test]
    fn qtensor_rejects_out_of_range_codes() {
        let err = QTensor::new(Shape3::new(1, 1, 2), vec![0, 5], 2).unwrap_err();
        assert_eq!(
            err,
            QuantError::CodeRange {
                index: 1,
                code: 5,
                scale_n: 2
            }
        );
    }

    #[test]
    fn output_stage_clamps_and_rescales() {
        assert_eq!(hardtanh_output_code(3, 2, 8).unwrap(), 192);
        assert_eq!(hardtanh_output_code(1 << 20, 2, 8).unwrap(), 256);
        assert_eq!(hardtanh_output_code(-(1 << 20), 2, 8).unwrap(), -256);
    }
}
