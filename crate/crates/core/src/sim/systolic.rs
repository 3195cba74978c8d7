//! Weight- and output-stationary systolic execution.

use serde::{Deserialize, Serialize};

use super::cycles::{self, CycleReport};
use super::tensor::{AccTensor, QTensor};
use crate::config::ArrayConfig;
use crate::error::SimError;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystolicVariant {
    Ws,
    Os,
}

/// Tile extents: rows, columns and reduction depth per pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub t_n: usize,
    pub t_m: usize,
    pub t_k: usize,
}

impl Tiling {
    pub fn for_array(arr: &ArrayConfig, k: usize) -> Self {
        Tiling {
            t_n: arr.rows,
            t_m: arr.cols,
            t_k: k.clamp(1, arr.rf_depth),
        }
    }
}

/// Tiled integer product. Both variants visit the same partial sums, so their
/// results are bit-identical; only the cycle accounting differs.
pub fn exec_systolic<S: Real>(
    a: &QTensor<S>,
    b: &QTensor<S>,
    variant: SystolicVariant,
    tiling: Tiling,
    arr: &ArrayConfig,
) -> Result<(AccTensor<S>, CycleReport), SimError> {
    if a.cols != b.rows {
        return Err(SimError::ShapeMismatch(format!(
            "inner extents {} and {} differ",
            a.cols, b.rows
        )));
    }
    if tiling.t_n > arr.rows || tiling.t_m > arr.cols || tiling.t_n == 0 || tiling.t_m == 0 {
        return Err(SimError::TileTooLarge {
            tile_n: tiling.t_n,
            tile_m: tiling.t_m,
            rows: arr.rows,
            cols: arr.cols,
        });
    }
    let (n, m, k) = (a.rows, b.cols, a.cols);
    let t_k = tiling.t_k.max(1);
    let bt = b.transpose();
    let mut out = AccTensor::zeros(n, m, a.scale * b.scale);
    for i0 in (0..n).step_by(tiling.t_n) {
        for j0 in (0..m).step_by(tiling.t_m) {
            for i in i0..(i0 + tiling.t_n).min(n) {
                let ar = a.row(i);
                for j in j0..(j0 + tiling.t_m).min(m) {
                    let br = bt.row(j);
                    let mut acc = 0i32;
                    for k0 in (0..k).step_by(t_k) {
                        let k1 = (k0 + t_k).min(k);
                        acc += ar[k0..k1]
                            .iter()
                            .zip(&br[k0..k1])
                            .map(|(&x, &y)| x as i32 * y as i32)
                            .sum::<i32>();
                    }
                    out.set(i, j, acc);
                }
            }
        }
    }
    let report = match variant {
        SystolicVariant::Os => cycles::systolic_os(n, m, k, arr),
        SystolicVariant::Ws => cycles::systolic_ws(n, m, k, t_k, arr),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::tensor::gemm_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> QTensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen::<i8>()).collect();
        QTensor::new(rows, cols, data, 0.01).unwrap()
    }

    #[test]
    fn identity_passes_through() {
        let arr = ArrayConfig::default();
        let mut id = QTensor::zeros(4, 4, 1.0);
        for i in 0..4 {
            id.data[i * 4 + i] = 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(4, 4, &mut rng);
        for v in [SystolicVariant::Ws, SystolicVariant::Os] {
            let (out, _) = exec_systolic(&id, &b, v, Tiling::for_array(&arr, 4), &arr).unwrap();
            let expect: Vec<i32> = b.data.iter().map(|&x| x as i32).collect();
            assert_eq!(out.data, expect);
        }
    }

    #[test]
    fn matches_schoolbook() {
        let arr = ArrayConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(64, 64, &mut rng);
        let b = random(64, 64, &mut rng);
        let oracle = gemm_reference(&a, &b).unwrap();
        for v in [SystolicVariant::Ws, SystolicVariant::Os] {
            let (out, rep) = exec_systolic(&a, &b, v, Tiling::for_array(&arr, 64), &arr).unwrap();
            assert_eq!(out, oracle);
            assert_eq!(rep.macs, 64 * 64 * 64);
        }
    }

    #[test]
    fn oversize_tile_rejected() {
        let arr = ArrayConfig::default();
        let a = QTensor::<f64>::zeros(2, 2, 1.0);
        let t = Tiling { t_n: 64, t_m: 32, t_k: 2 };
        assert!(matches!(
            exec_systolic(&a, &a, SystolicVariant::Os, t, &arr),
            Err(SimError::TileTooLarge { .. })
        ));
        let b = QTensor::<f64>::zeros(3, 2, 1.0);
        assert!(matches!(
            exec_systolic(&a, &b, SystolicVariant::Os, Tiling::for_array(&arr, 2), &arr),
            Err(SimError::ShapeMismatch(_))
        ));
    }
}
