//! Cycle-by-cycle model of one output-stationary tile, used to check the
//! analytic timing and the feed-delay schedule.

use super::tensor::QTensor;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct WavefrontResult {
    pub out: Vec<i32>,
    /// Cycles until the last MAC retires into its output register.
    pub compute_cycles: u64,
    pub drain_cycles: u64,
}

impl WavefrontResult {
    pub fn total(&self) -> u64 {
        self.compute_cycles + self.drain_cycles
    }
}

/// Simulates an `rows x cols` PE grid. `A` enters from the left with row `i`
/// delayed `row_delay[i]`; `B` enters from the top with column `j` delayed
/// `col_delay[j]`. Operands hop one PE per cycle.
pub fn simulate_os_tile<S: Real>(
    a: &QTensor<S>,
    b: &QTensor<S>,
    rows: usize,
    cols: usize,
    row_delay: &[u64],
    col_delay: &[u64],
) -> WavefrontResult {
    let (n, m, k) = (a.rows, b.cols, a.cols);
    assert!(n <= rows && m <= cols && b.rows == k);
    // registers hold Option<(value)> flowing right (a) and down (b)
    let mut a_reg: Vec<Option<i32>> = vec![None; rows * cols];
    let mut b_reg: Vec<Option<i32>> = vec![None; rows * cols];
    let mut acc = vec![0i32; rows * cols];
    let mut macs_done = vec![0usize; rows * cols];
    let mut last_mac = 0u64;
    let horizon = (k + rows + cols) as u64 * 2 + row_delay.iter().chain(col_delay).max().copied().unwrap_or(0);
    for t in 0..horizon {
        let mut next_a = vec![None; rows * cols];
        let mut next_b = vec![None; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let idx = i * cols + j;
                let a_in = if j == 0 {
                    let d = row_delay.get(i).copied().unwrap_or(0);
                    (i < n && t >= d && ((t - d) as usize) < k).then(|| a.get(i, (t - d) as usize) as i32)
                } else {
                    a_reg[idx - 1]
                };
                let b_in = if i == 0 {
                    let d = col_delay.get(j).copied().unwrap_or(0);
                    (j < m && t >= d && ((t - d) as usize) < k).then(|| b.get((t - d) as usize, j) as i32)
                } else {
                    b_reg[idx - cols]
                };
                if let (Some(x), Some(y)) = (a_in, b_in) {
                    acc[idx] += x * y;
                    macs_done[idx] += 1;
                    last_mac = t;
                }
                next_a[idx] = a_in;
                next_b[idx] = b_in;
            }
        }
        a_reg = next_a;
        b_reg = next_b;
    }
    let out = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| acc[i * cols + j])
        .collect();
    WavefrontResult {
        out,
        // elapsed cycles through the last MAC plus one output latch
        compute_cycles: last_mac + 2,
        drain_cycles: rows as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArrayConfig;
    use crate::sim::cycles::{feed_delay_schedule, systolic_os};
    use crate::sim::tensor::gemm_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> QTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QTensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen()).collect(), 1.0).unwrap()
    }

    #[test]
    fn full_tile_matches_formula() {
        let arr = ArrayConfig::default();
        let a = random(32, 32, 1);
        let b = random(32, 32, 2);
        let d = feed_delay_schedule(32);
        let w = simulate_os_tile(&a, &b, 32, 32, &d, &d);
        assert_eq!(w.out, gemm_reference(&a, &b).unwrap().data);
        let r = systolic_os(32, 32, 32, &arr);
        assert_eq!(w.total(), r.total);
        assert_eq!(w.compute_cycles, r.fill + r.stream);
    }

    #[test]
    fn misaligned_feed_gives_wrong_products() {
        let a = random(4, 6, 3);
        let b = random(6, 4, 4);
        let zero = vec![0; 4];
        let w = simulate_os_tile(&a, &b, 4, 4, &zero, &zero);
        assert_ne!(w.out, gemm_reference(&a, &b).unwrap().data);
    }
}
