//! Piecewise-linear nonlinear units: softmax, GELU and layer normalization.

use super::cycles::{self, CycleReport};
use super::tensor::{round_half_away, AccTensor, QTensor};
use crate::config::ArrayConfig;
use crate::error::SimError;
use crate::kernel_ir::NonlinearKind;
use crate::scalar::Real;

/// Linear interpolation over uniform knots on `[lo, hi]`; inputs are clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Pwl<S: Real> {
    pub lo: S,
    pub hi: S,
    pub knots: Vec<S>,
}

impl<S: Real> Pwl<S> {
    pub fn fit(lo: f64, hi: f64, segments: usize, f: impl Fn(f64) -> f64) -> Self {
        let step = (hi - lo) / segments as f64;
        Pwl {
            lo: S::of(lo),
            hi: S::of(hi),
            knots: (0..=segments).map(|i| S::of(f(lo + step * i as f64))).collect(),
        }
    }

    pub fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn eval(&self, x: S) -> S {
        let x = x.max(self.lo).min(self.hi);
        let seg = S::of(self.segments() as f64);
        let pos = (x - self.lo) / (self.hi - self.lo) * seg;
        let i = pos.floor().to_usize().unwrap_or(0).min(self.segments() - 1);
        let t = pos - S::of(i as f64);
        self.knots[i] + (self.knots[i + 1] - self.knots[i]) * t
    }
}

/// Table set used by the nonlinear unit.
#[derive(Debug, Clone)]
pub struct NonlinearTables<S: Real> {
    /// `2^f` on `[0, 1]`; exp uses `2^(x log2 e)` split into integer and fraction.
    pub exp2_frac: Pwl<S>,
    pub gelu: Pwl<S>,
    /// `1/sqrt(m)` on `[1, 4]`; the exponent is split off in powers of four.
    pub rsqrt: Pwl<S>,
    /// Longest row the unit buffers.
    pub row_capacity: usize,
}

impl<S: Real> Default for NonlinearTables<S> {
    fn default() -> Self {
        NonlinearTables {
            exp2_frac: Pwl::fit(0.0, 1.0, 16, |f| f.exp2()),
            gelu: Pwl::fit(-8.0, 8.0, 64, gelu_exact),
            rsqrt: Pwl::fit(1.0, 4.0, 16, |m| 1.0 / m.sqrt()),
            row_capacity: 4096,
        }
    }
}

pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Error function: Maclaurin series below 3, continued fraction above.
pub fn erf(x: f64) -> f64 {
    let ax = x.abs();
    if ax == 0.0 {
        return x;
    }
    let r = if ax < 3.0 {
        // Maclaurin series
        let mut term = ax;
        let mut sum = ax;
        let x2 = ax * ax;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() || n > 200.0 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // continued fraction for erfc
        let mut f = 0.0;
        for k in (1..=60).rev() {
            f = (k as f64 / 2.0) / (ax + f);
        }
        1.0 - (-ax * ax).exp() / (std::f64::consts::PI.sqrt() * (ax + f))
    };
    r.copysign(x)
}

impl<S: Real> NonlinearTables<S> {
    pub fn exp(&self, x: S) -> S {
        let y = x.as_f64() * std::f64::consts::LOG2_E;
        if y < -126.0 {
            return S::zero();
        }
        let int = y.floor();
        let frac = self.exp2_frac.eval(S::of(y - int));
        frac * S::of(int.exp2())
    }

    pub fn rsqrt(&self, v: S) -> S {
        let mut m = v.as_f64();
        if m <= 0.0 {
            return S::zero();
        }
        let mut scale = 1.0;
        while m >= 4.0 {
            m /= 4.0;
            scale *= 0.5;
        }
        while m < 1.0 {
            m *= 4.0;
            scale *= 2.0;
        }
        self.rsqrt.eval(S::of(m)) * S::of(scale)
    }
}

const LN_EPS: f64 = 1e-5;

fn exact_row(kind: NonlinearKind, x: &[f64]) -> Vec<f64> {
    match kind {
        NonlinearKind::Softmax => {
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
        NonlinearKind::Gelu => x.iter().map(|&v| gelu_exact(v)).collect(),
        NonlinearKind::LayerNorm => {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
        }
    }
}

fn approx_row<S: Real>(kind: NonlinearKind, x: &[S], t: &NonlinearTables<S>) -> Vec<S> {
    match kind {
        NonlinearKind::Softmax => {
            let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
            let e: Vec<S> = x.iter().map(|&v| t.exp(v - max)).collect();
            let s = e.iter().fold(S::zero(), |a, &b| a + b);
            e.iter().map(|&v| v / s).collect()
        }
        NonlinearKind::Gelu => x
            .iter()
            .map(|&v| {
                if v > t.gelu.hi {
                    v
                } else if v < t.gelu.lo {
                    S::zero()
                } else {
                    t.gelu.eval(v)
                }
            })
            .collect(),
        NonlinearKind::LayerNorm => {
            let n = S::of(x.len() as f64);
            let mean = x.iter().fold(S::zero(), |a, &b| a + b) / n;
            let var = x.iter().fold(S::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let inv = t.rsqrt(var + S::of(LN_EPS));
            x.iter().map(|&v| (v - mean) * inv).collect()
        }
    }
}

/// Output of a nonlinear unit.
#[derive(Debug, Clone)]
pub struct NonlinearOutput<S: Real> {
    pub out: QTensor<S>,
    pub cycles: CycleReport,
    /// Largest deviation from the exact real-valued function, before requantization.
    pub max_abs_err: f64,
}

/// Applies `kind` row-wise to the dequantized accumulator.
pub fn exec_nonlinear<S: Real>(
    kind: NonlinearKind,
    x: &AccTensor<S>,
    tables: &NonlinearTables<S>,
    arr: &ArrayConfig,
) -> Result<NonlinearOutput<S>, SimError> {
    if x.cols > tables.row_capacity {
        return Err(SimError::RowTooLong {
            len: x.cols,
            capacity: tables.row_capacity,
        });
    }
    let scale = x.scale.as_f64();
    let mut vals: Vec<S> = Vec::with_capacity(x.data.len());
    let mut max_err = 0.0f64;
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let real: Vec<f64> = row.iter().map(|&v| v as f64 * scale).collect();
        let approx = approx_row(kind, &real.iter().map(|&v| S::of(v)).collect::<Vec<_>>(), tables);
        for (a, e) in approx.iter().zip(exact_row(kind, &real)) {
            max_err = max_err.max((a.as_f64() - e).abs());
        }
        vals.extend(approx);
    }
    let out_scale = match kind {
        NonlinearKind::Softmax => 1.0 / 127.0,
        _ => {
            let m = vals.iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
            if m > 0.0 { m / 127.0 } else { 1.0 / 127.0 }
        }
    };
    let data = vals
        .iter()
        .map(|v| round_half_away(v.as_f64() / out_scale).clamp(-128.0, 127.0) as i8)
        .collect();
    Ok(NonlinearOutput {
        out: QTensor::new(x.rows, x.cols, data, S::of(out_scale))?,
        cycles: cycles::nonlinear(kind, x.rows, x.cols, arr),
        max_abs_err: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BOUND: f64 = 1.0 / 64.0;

    fn acc(rows: usize, cols: usize, data: Vec<i32>, scale: f64) -> AccTensor<f64> {
        AccTensor { rows, cols, data, scale }
    }

    #[test]
    fn erf_reference_values() {
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-14);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-14);
        assert!((erf(3.5) - 0.999_999_256_901_627_7).abs() < 1e-14);
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn uniform_softmax() {
        let t = NonlinearTables::default();
        let x = acc(1, 8, vec![5; 8], 0.1);
        let o = exec_nonlinear(NonlinearKind::Softmax, &x, &t, &ArrayConfig::default()).unwrap();
        let s = o.out.scale;
        assert!(o.out.data.iter().all(|&q| (q as f64 * s - 0.125).abs() <= s));
    }

    #[test]
    fn gelu_zero_is_zero() {
        let t = NonlinearTables::<f64>::default();
        assert_eq!(t.gelu.eval(0.0), 0.0);
        let x = acc(1, 1, vec![0], 1.0);
        let o = exec_nonlinear(NonlinearKind::Gelu, &x, &t, &ArrayConfig::default()).unwrap();
        assert_eq!(o.out.data, vec![0]);
    }

    #[test]
    fn random_rows_within_bound() {
        let t = NonlinearTables::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arr = ArrayConfig::default();
        for kind in [NonlinearKind::Softmax, NonlinearKind::Gelu, NonlinearKind::LayerNorm] {
            let data: Vec<i32> = (0..64 * 50).map(|_| rng.gen_range(-20000..20000)).collect();
            let x = acc(64, 50, data, 1.0 / 2000.0);
            let o = exec_nonlinear(kind, &x, &t, &arr).unwrap();
            assert!(o.max_abs_err <= BOUND, "{kind:?}: {}", o.max_abs_err);
        }
    }

    #[test]
    fn row_capacity_enforced() {
        let t = NonlinearTables {
            row_capacity: 4,
            ..NonlinearTables::default()
        };
        let x = acc(1, 5, vec![0; 5], 1.0);
        assert!(matches!(
            exec_nonlinear(NonlinearKind::Gelu, &x, &t, &ArrayConfig::default()),
            Err(SimError::RowTooLong { len: 5, capacity: 4 })
        ));
    }

    #[test]
    fn tables_work_in_f32() {
        let t = NonlinearTables::<f32>::default();
        assert!((t.exp(-1.0f32) - (-1.0f32).exp()).abs() < 1e-3);
        assert!((t.rsqrt(9.0f32) - 1.0 / 3.0).abs() < 1e-2);
    }
}
