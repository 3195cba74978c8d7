//! Quantized int8 tensors and int32 accumulators.

use num_traits::Float;

use crate::error::SimError;
use crate::scalar::Real;

/// Row-major int8 matrix with a symmetric per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<S: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
    pub scale: S,
}

/// Row-major int32 accumulator matrix; `scale` is the product of operand scales.
#[derive(Debug, Clone, PartialEq)]
pub struct AccTensor<S: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
    pub scale: S,
}

fn check(rows: usize, cols: usize, len: usize, scale: f64) -> Result<(), SimError> {
    if rows * cols != len {
        return Err(SimError::InvalidTensor(format!(
            "{rows}x{cols} needs {} elements, got {len}",
            rows * cols
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(SimError::InvalidTensor(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

impl<S: Real> QTensor<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, scale: S) -> Result<Self, SimError> {
        check(rows, cols, data.len(), scale.as_f64())?;
        Ok(QTensor { rows, cols, data, scale })
    }

    pub fn zeros(rows: usize, cols: usize, scale: S) -> Self {
        QTensor {
            rows,
            cols,
            data: vec![0; rows * cols],
            scale,
        }
    }

    /// Symmetric quantization with scale `max|x| / 127`.
    pub fn quantize(rows: usize, cols: usize, values: &[S]) -> Result<Self, SimError> {
        let max = values.iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
        let scale = if max > 0.0 { max / 127.0 } else { 1.0 / 127.0 };
        let data = values
            .iter()
            .map(|v| round_half_away(v.as_f64() / scale).clamp(-128.0, 127.0) as i8)
            .collect();
        QTensor::new(rows, cols, data, S::of(scale))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn dequant(&self, r: usize, c: usize) -> S {
        S::of(self.get(r, c) as f64 * self.scale.as_f64())
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        QTensor {
            rows: self.cols,
            cols: self.rows,
            data,
            scale: self.scale,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, SimError> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(SimError::ShapeMismatch(format!(
                    "row {r} outside {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(QTensor {
            rows: rows.len(),
            cols: self.cols,
            data,
            scale: self.scale,
        })
    }

    pub fn row_block(&self, start: usize, len: usize) -> Result<Self, SimError> {
        if start + len > self.rows {
            return Err(SimError::ShapeMismatch(format!(
                "rows {start}..{} outside {}",
                start + len,
                self.rows
            )));
        }
        Ok(QTensor {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
            scale: self.scale,
        })
    }

    pub fn col_window(&self, start: usize, len: usize) -> Result<Self, SimError> {
        if start + len > self.cols {
            return Err(SimError::ShapeMismatch(format!(
                "columns {start}..{} outside {}",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(QTensor {
            rows: self.rows,
            cols: len,
            data,
            scale: self.scale,
        })
    }

    /// Re-expresses the tensor at a coarser `scale` (exact rounding).
    pub fn rescale(&self, scale: S) -> Self {
        let ratio = self.scale.as_f64() / scale.as_f64();
        QTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| requantize_value(v as i32, ratio)).collect(),
            scale,
        }
    }

    /// Column-wise concatenation at the largest part scale.
    pub fn concat_cols(parts: &[&QTensor<S>]) -> Result<Self, SimError> {
        let first = parts
            .first()
            .ok_or_else(|| SimError::InvalidTensor("concatenation of zero tensors".into()))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(SimError::ShapeMismatch("concatenated parts differ in rows".into()));
        }
        if parts.len() == 1 {
            return Ok((*first).clone());
        }
        let scale = parts.iter().map(|p| p.scale).fold(first.scale, |a, b| a.max(b));
        let rescaled: Vec<QTensor<S>> = parts
            .iter()
            .map(|p| if p.scale == scale { (*p).clone() } else { p.rescale(scale) })
            .collect();
        let cols = rescaled.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in &rescaled {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(QTensor { rows, cols, data, scale })
    }
}

impl<S: Real> AccTensor<S> {
    pub fn zeros(rows: usize, cols: usize, scale: S) -> Self {
        AccTensor {
            rows,
            cols,
            data: vec![0; rows * cols],
            scale,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: i32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn max_abs(&self) -> u32 {
        self.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }

    /// Output scale that maps the largest magnitude onto 127.
    pub fn dynamic_scale(&self) -> S {
        let m = self.max_abs();
        if m == 0 {
            self.scale
        } else {
            S::of(m as f64 * self.scale.as_f64() / 127.0)
        }
    }
}

pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `round_half_away(v * ratio)` saturated to int8, computed exactly from the
/// binary expansion of `ratio`.
pub fn requantize_value(v: i32, ratio: f64) -> i8 {
    if v == 0 || ratio == 0.0 {
        return 0;
    }
    let (mant, exp, sign) = Float::integer_decode(ratio);
    let negative = (v < 0) != (sign < 0);
    let prod = (v.unsigned_abs() as u128) * mant as u128;
    let mag: u128 = if exp >= 0 {
        if exp >= 64 || prod.leading_zeros() < exp as u32 + 1 {
            u128::MAX
        } else {
            prod << exp
        }
    } else {
        let shift = (-exp) as u32;
        if shift >= 127 {
            // prod < 2^85, so the half-bit test below is all that can fire
            0
        } else {
            (prod + (1u128 << (shift - 1))) >> shift
        }
    };
    if negative {
        if mag >= 128 { -128 } else { -(mag as i16) as i8 }
    } else if mag >= 127 {
        127
    } else {
        mag as i8
    }
}

pub fn requantize<S: Real>(acc: &AccTensor<S>, out_scale: S) -> QTensor<S> {
    let ratio = acc.scale.as_f64() / out_scale.as_f64();
    QTensor {
        rows: acc.rows,
        cols: acc.cols,
        data: acc.data.iter().map(|&v| requantize_value(v, ratio)).collect(),
        scale: out_scale,
    }
}

/// Exact `int8 x int8 -> int32` reference product.
pub fn gemm_reference<S: Real>(a: &QTensor<S>, b: &QTensor<S>) -> Result<AccTensor<S>, SimError> {
    if a.cols != b.rows {
        return Err(SimError::ShapeMismatch(format!(
            "inner extents {} and {} differ",
            a.cols, b.rows
        )));
    }
    let mut out = AccTensor::zeros(a.rows, b.cols, a.scale * b.scale);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0i32;
            for t in 0..a.cols {
                s += a.get(i, t) as i32 * b.get(t, j) as i32;
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requantize_basics() {
        assert_eq!(requantize_value(0, 0.5), 0);
        assert_eq!(requantize_value(1 << 30, 1e-3), 127);
        assert_eq!(requantize_value(-(1 << 30), 1e-3), -128);
        assert_eq!(requantize_value(5, 0.5), 3);
        assert_eq!(requantize_value(-5, 0.5), -3);
        assert_eq!(requantize_value(3, 0.5), 2);
        assert_eq!(requantize_value(100, 1.0), 100);
        assert_eq!(requantize_value(7, 1e-300), 0);
    }

    #[test]
    fn quantize_round_trip() {
        let vals = [0.5f64, -1.0, 0.25, 0.0];
        let q = QTensor::quantize(2, 2, &vals).unwrap();
        assert_eq!(q.data, vec![64, -127, 32, 0]);
        assert!((q.dequant(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(QTensor::<f64>::new(2, 2, vec![0; 3], 1.0).is_err());
        assert!(QTensor::<f64>::new(1, 1, vec![0], 0.0).is_err());
    }

    #[test]
    fn concat_uses_common_scale() {
        let a = QTensor::new(1, 1, vec![100], 1.0f64).unwrap();
        let b = QTensor::new(1, 1, vec![100], 2.0f64).unwrap();
        let c = QTensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.scale, 2.0);
        assert_eq!(c.data, vec![50, 100]);
    }

    #[test]
    fn generic_over_f32() {
        let a = QTensor::new(1, 2, vec![3, 4], 0.5f32).unwrap();
        let acc = gemm_reference(&a, &a.transpose()).unwrap();
        assert_eq!(acc.data, vec![25]);
        assert_eq!(acc.scale, 0.25f32);
    }
}
