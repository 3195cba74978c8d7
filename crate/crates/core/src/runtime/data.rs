//! Deterministic weights, inputs and graph adjacencies.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::QTensor;

/// Random stream for the named object under `seed`.
pub fn stream(seed: u64, id: &str) -> ChaCha8Rng {
    // FNV-1a selects the ChaCha stream so every object draws independently
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Weight matrix with values in [-64, 64] scaled to keep outputs near unit range.
pub fn weight(seed: u64, id: &str, rows: usize, cols: usize) -> QTensor {
    let mut rng = stream(seed, id);
    let data = (0..rows * cols).map(|_| rng.gen_range(-64i8..=64)).collect();
    let scale = 1.0 / (64.0 * (rows.max(1) as f64).sqrt());
    QTensor::new(rows, cols, data, scale).expect("sizes match")
}

/// Activation tensor with full-range int8 values and scale 1/127.
pub fn input(seed: u64, id: &str, rows: usize, cols: usize) -> QTensor {
    let mut rng = stream(seed, id);
    let data = (0..rows * cols).map(|_| rng.gen_range(-127i8..=127)).collect();
    QTensor::new(rows, cols, data, 1.0 / 127.0).expect("sizes match")
}

/// Sorted `(row, col)` nonzeros with the given per-row degrees.
pub fn adjacency(seed: u64, id: &str, nodes: usize, degrees: &[usize]) -> Vec<(usize, usize)> {
    let mut rng = stream(seed, id);
    let mut coords = Vec::with_capacity(degrees.iter().sum());
    for (r, &d) in degrees.iter().enumerate() {
        let mut cols = sample(&mut rng, nodes, d.min(nodes)).into_vec();
        cols.sort_unstable();
        coords.extend(cols.into_iter().map(|c| (r, c)));
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_independent() {
        assert_eq!(weight(7, "w", 4, 4), weight(7, "w", 4, 4));
        assert_ne!(weight(7, "w", 4, 4).data, weight(7, "v", 4, 4).data);
        assert_ne!(weight(7, "w", 4, 4).data, weight(8, "w", 4, 4).data);
    }

    #[test]
    fn adjacency_degrees_respected() {
        let adj = adjacency(1, "g", 10, &[3, 0, 10, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(adj.len(), 20);
        assert_eq!(adj.iter().filter(|e| e.0 == 2).count(), 10);
        assert!(adj.windows(2).all(|w| w[0] < w[1]));
    }
}
