//! Bit-exact fixed-point arithmetic and reference kernels.
//!
//! All on-chip data is held in a two's-complement fixed-point format with
//! `il + fl` bits (`il` includes the sign bit). Multiply-accumulate keeps
//! products in 2*(il+fl)-bit registers and accumulates in a 64-bit register,
//! so tile-level accumulation order never changes the result. Nonlinear
//! kernels (GeLU, softmax, layer-norm) are evaluated in double precision and
//! quantized once, modeling an ideal lookup unit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("invalid fixed-point format il={il} fl={fl} (need il >= 2, il + fl <= 32)")]
    BadFormat { il: u32, fl: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty row")]
    EmptyRow,
}

/// Fixed-point format. `il` counts the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedFormat {
    pub il: u32,
    pub fl: u32,
}

impl FixedFormat {
    pub fn new(il: u32, fl: u32) -> Result<Self, NumericsError> {
        if il < 2 || il + fl > 32 {
            return Err(NumericsError::BadFormat { il, fl });
        }
        Ok(Self { il, fl })
    }

    pub fn bits(&self) -> u32 {
        self.il + self.fl
    }

    pub fn raw_max(&self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }

    pub fn raw_min(&self) -> i64 {
        -(1i64 << (self.bits() - 1))
    }

    /// Value of one least-significant bit.
    pub fn ulp(&self) -> f64 {
        (self.fl as f64).exp2().recip()
    }

    pub fn scale(&self) -> f64 {
        (self.fl as f64).exp2()
    }
}

/// Default format used by the shipped presets.
pub const DEFAULT_FORMAT: FixedFormat = FixedFormat { il: 4, fl: 16 };

/// Round-to-nearest-even quantization with saturation; never traps.
pub fn quantize(x: f64, fmt: FixedFormat) -> i32 {
    if x.is_nan() {
        return 0;
    }
    let scaled = x * fmt.scale();
    let r = if scaled >= fmt.raw_max() as f64 {
        fmt.raw_max()
    } else if scaled <= fmt.raw_min() as f64 {
        fmt.raw_min()
    } else {
        scaled.round_ties_even() as i64
    };
    r.clamp(fmt.raw_min(), fmt.raw_max()) as i32
}

pub fn dequantize(raw: i32, fmt: FixedFormat) -> f64 {
    raw as f64 * fmt.ulp()
}

/// Round-to-nearest-even of `acc / 2^fl`, saturated to the format.
pub fn rescale_accumulator(acc: i64, fmt: FixedFormat) -> i32 {
    let fl = fmt.fl;
    if fl == 0 {
        return acc.clamp(fmt.raw_min(), fmt.raw_max()) as i32;
    }
    let mut q = acc >> fl; // floor
    let rem = acc - (q << fl); // in [0, 2^fl)
    let half = 1i64 << (fl - 1);
    if rem > half || (rem == half && (q & 1) == 1) {
        q += 1;
    }
    q.clamp(fmt.raw_min(), fmt.raw_max()) as i32
}

/// Dense fixed-point tensor with shape (batch, rows, cols).
#[derive(Debug, Clone, PartialEq)]
pub struct FixedTensor {
    pub shape: (usize, usize, usize),
    pub raw: Vec<i32>,
    pub fmt: FixedFormat,
}

impl FixedTensor {
    pub fn zeros(shape: (usize, usize, usize), fmt: FixedFormat) -> Self {
        Self { shape, raw: vec![0; shape.0 * shape.1 * shape.2], fmt }
    }

    pub fn from_f64(shape: (usize, usize, usize), vals: &[f64], fmt: FixedFormat) -> Self {
        assert_eq!(vals.len(), shape.0 * shape.1 * shape.2);
        Self { shape, raw: vals.iter().map(|&v| quantize(v, fmt)).collect(), fmt }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    #[inline]
    pub fn idx(&self, b: usize, r: usize, c: usize) -> usize {
        (b * self.shape.1 + r) * self.shape.2 + c
    }

    #[inline]
    pub fn get(&self, b: usize, r: usize, c: usize) -> i32 {
        self.raw[self.idx(b, r, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, r: usize, c: usize, v: i32) {
        let i = self.idx(b, r, c);
        self.raw[i] = v;
    }

    pub fn row(&self, b: usize, r: usize) -> &[i32] {
        let start = self.idx(b, r, 0);
        &self.raw[start..start + self.shape.2]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| dequantize(r, self.fmt)).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.raw.iter().filter(|&&r| r != 0).count()
    }
}

/// Reference tiled multiply-accumulate: W (b,x,y) * A (b,y,z) -> (b,x,z).
///
/// Products and the running sum live in a 64-bit accumulator; the result is
/// rescaled and saturated once per output element, so it is exactly
/// permutation-invariant in the reduction index.
pub fn mac_reference(w: &FixedTensor, a: &FixedTensor) -> Result<FixedTensor, NumericsError> {
    if w.fmt != a.fmt {
        return Err(NumericsError::ShapeMismatch("operand formats differ".into()));
    }
    let (bw, x, y) = w.shape;
    let (ba, ya, z) = a.shape;
    if y != ya || bw != ba {
        return Err(NumericsError::ShapeMismatch(format!(
            "W {:?} incompatible with A {:?}",
            w.shape, a.shape
        )));
    }
    let mut out = FixedTensor::zeros((bw, x, z), w.fmt);
    for b in 0..bw {
        for i in 0..x {
            for j in 0..z {
                let mut acc: i64 = 0;
                for k in 0..y {
                    acc += w.get(b, i, k) as i64 * a.get(b, k, j) as i64;
                }
                out.set(b, i, j, rescale_accumulator(acc, w.fmt));
            }
        }
    }
    Ok(out)
}

/// Tanh-approximation GeLU on a dequantized value, quantized back.
pub fn gelu(raw: i32, fmt: FixedFormat) -> i32 {
    quantize(gelu_f64(dequantize(raw, fmt)), fmt)
}

pub fn gelu_f64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Numerically stable softmax of `scale * row`, quantized per element.
pub fn softmax_row(row: &[i32], scale: f64, fmt: FixedFormat) -> Result<Vec<i32>, NumericsError> {
    if row.is_empty() {
        return Err(NumericsError::EmptyRow);
    }
    let xs: Vec<f64> = row.iter().map(|&r| dequantize(r, fmt) * scale).collect();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| quantize(e / sum, fmt)).collect())
}

/// Layer normalization of one row with affine parameters, quantized per element.
pub fn layer_norm(
    row: &[i32],
    gamma: &[i32],
    beta: &[i32],
    eps: f64,
    fmt: FixedFormat,
) -> Result<Vec<i32>, NumericsError> {
    if row.len() != gamma.len() || row.len() != beta.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "row {} gamma {} beta {}",
            row.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if row.is_empty() {
        return Err(NumericsError::EmptyRow);
    }
    let xs: Vec<f64> = row.iter().map(|&r| dequantize(r, fmt)).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = (var + eps).sqrt().recip();
    Ok(xs
        .iter()
        .zip(gamma.iter().zip(beta.iter()))
        .map(|(&x, (&g, &b))| {
            quantize((x - mean) * inv * dequantize(g, fmt) + dequantize(b, fmt), fmt)
        })
        .collect())
}

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt() -> FixedFormat {
        DEFAULT_FORMAT
    }

    #[test]
    fn quantize_basics() {
        assert_eq!(quantize(0.0, fmt()), 0);
        assert_eq!(quantize(0.5, fmt()), 32768);
        // saturated max: clamp(round(10 * 65536), -524288, 524287)
        assert_eq!(quantize(10.0, fmt()), 524287);
        assert_eq!(quantize(-10.0, fmt()), -524288);
    }

    #[test]
    fn quantize_round_to_even() {
        // 1.5 ulp rounds to 2 raw, 0.5 ulp rounds to 0 raw
        let f = fmt();
        assert_eq!(quantize(1.5 * f.ulp(), f), 2);
        assert_eq!(quantize(0.5 * f.ulp(), f), 0);
        assert_eq!(quantize(2.5 * f.ulp(), f), 2);
    }

    #[test]
    fn quantize_dequantize_error_bound() {
        let f = fmt();
        for i in 0..1000 {
            let x = -7.5 + i as f64 * 0.015;
            let err = (dequantize(quantize(x, f), f) - x).abs();
            assert!(err <= 0.5 * f.ulp() + 1e-12, "x={x} err={err}");
        }
    }

    #[test]
    fn rescale_matches_float_rounding() {
        let f = fmt();
        for acc in [-100_000i64, -3, -1, 0, 1, 32768, 32769, 98304, 7_000_000] {
            let expect = quantize(acc as f64 / f.scale() / f.scale(), f);
            assert_eq!(rescale_accumulator(acc, f), expect, "acc={acc}");
        }
    }

    #[test]
    fn mac_identity_and_zero() {
        let f = fmt();
        let n = 4;
        let mut w = FixedTensor::zeros((1, n, n), f);
        for i in 0..n {
            w.set(0, i, i, quantize(1.0, f));
        }
        let vals: Vec<f64> = (0..n * n).map(|i| (i as f64 - 7.0) * 0.1).collect();
        let a = FixedTensor::from_f64((1, n, n), &vals, f);
        let out = mac_reference(&w, &a).unwrap();
        assert_eq!(out.raw, a.raw);

        let z = FixedTensor::zeros((1, n, n), f);
        let out = mac_reference(&w, &z).unwrap();
        assert!(out.raw.iter().all(|&r| r == 0));
    }

    #[test]
    fn mac_matches_double_precision_oracle() {
        use rand::{Rng, SeedableRng};
        let f = fmt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let wv: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let av: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = FixedTensor::from_f64((1, 4, 4), &wv, f);
            let a = FixedTensor::from_f64((1, 4, 4), &av, f);
            let out = mac_reference(&w, &a).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += dequantize(w.get(0, i, k), f) * dequantize(a.get(0, k, j), f);
                    }
                    let expect = quantize(acc, f);
                    let got = out.get(0, i, j);
                    assert!((got - expect).abs() <= 1, "got {got} expect {expect}");
                }
            }
        }
    }

    #[test]
    fn mac_shape_mismatch() {
        let f = fmt();
        let w = FixedTensor::zeros((1, 4, 4), f);
        let a = FixedTensor::zeros((1, 5, 4), f);
        assert!(mac_reference(&w, &a).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let f = fmt();
        assert_eq!(gelu(0, f), 0);
        // large positive: identity within 1 ulp
        let x = quantize(6.0, f);
        assert!((gelu(x, f) - x).abs() <= 1);
        // large negative: ~0
        let x = quantize(-6.0, f);
        assert!(gelu(x, f).abs() <= 1);
        // gelu(x) <= x for x >= 0
        for i in 0..200 {
            let x = quantize(i as f64 * 0.04, f);
            assert!(gelu(x, f) <= x);
        }
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let f = fmt();
        let c = quantize(0.3, f);
        let out = softmax_row(&[c, c, c, c], 1.0, f).unwrap();
        let q = quantize(0.25, f);
        assert_eq!(out, vec![q, q, q, q]);

        let big = quantize(7.0, f);
        let small = quantize(-7.0, f);
        let out = softmax_row(&[big, small], 4.0, f).unwrap();
        assert!((out[0] - quantize(1.0, f)).abs() <= 1);
        assert!(out[1].abs() <= 1);

        assert_eq!(softmax_row(&[], 1.0, f), Err(NumericsError::EmptyRow));
    }

    #[test]
    fn softmax_matches_oracle_and_sums_to_one() {
        use rand::{Rng, SeedableRng};
        let f = fmt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let row: Vec<i32> = (0..8).map(|_| quantize(rng.gen_range(-2.0..2.0), f)).collect();
            let out = softmax_row(&row, 0.5, f).unwrap();
            // oracle recomputation
            let xs: Vec<f64> = row.iter().map(|&r| dequantize(r, f) * 0.5).collect();
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
            for (o, &x) in out.iter().zip(&xs) {
                let expect = quantize((x - max).exp() / sum, f);
                assert!((o - expect).abs() <= 1);
                assert!(*o >= 0);
            }
            let total: i64 = out.iter().map(|&v| v as i64).sum();
            let one = quantize(1.0, f) as i64;
            assert!((total - one).unsigned_abs() <= out.len() as u64);
        }
    }

    #[test]
    fn layer_norm_fixed_points() {
        let f = fmt();
        let one = quantize(1.0, f);
        // zero-mean unit-variance row passes through with gamma=1, beta=0
        let row: Vec<i32> = [1.0, -1.0, 1.0, -1.0].iter().map(|&v| quantize(v, f)).collect();
        let g = vec![one; 4];
        let b = vec![0; 4];
        let out = layer_norm(&row, &g, &b, LAYER_NORM_EPS, f).unwrap();
        for (o, r) in out.iter().zip(&row) {
            assert!((o - r).abs() <= 2, "out {o} row {r}");
        }
        // constant row collapses to beta
        let row = vec![quantize(0.7, f); 4];
        let beta = vec![quantize(0.2, f); 4];
        let out = layer_norm(&row, &g, &beta, LAYER_NORM_EPS, f).unwrap();
        for o in &out {
            assert!((o - quantize(0.2, f)).abs() <= 2);
        }
        // length mismatch
        assert!(layer_norm(&row, &g[..2], &beta, LAYER_NORM_EPS, f).is_err());
    }
}
