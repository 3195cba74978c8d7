//! Sparse queues and the two sparse execution modes (row SIMD and adder trees).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::cycles::{self, CycleReport};
use super::tensor::{AccTensor, QTensor};
use crate::config::ArrayConfig;
use crate::error::SimError;
use crate::mode_policy::RadtPartition;
use crate::scalar::Real;

/// Which product a queue gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparseOp {
    /// Queue lists active outputs `(r, c)` of `A * B`.
    Sddmm,
    /// Queue lists active entries `(r, c)` of the left operand `A`.
    Spmm,
}

/// One active position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueueEntry {
    pub row: usize,
    pub col: usize,
    /// Row-major index of the position in its operand.
    pub value_index: usize,
}

/// Active positions in strictly increasing `(row, col)` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseQueue {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<QueueEntry>,
    /// Kept-index list when the queue came from a top-k stream.
    pub kept: Vec<usize>,
}

/// How to describe the active set.
#[derive(Debug, Clone, Copy)]
pub enum QueueSource<'a> {
    /// Row-major boolean mask of `rows * cols` entries.
    Mask(&'a [bool]),
    /// Kept token indices; position `(r, c)` is active when both are kept.
    Kept(&'a [usize]),
    /// Explicit coordinates in any order.
    Coords(&'a [(usize, usize)]),
}

impl SparseQueue {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Active count of each row.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.rows];
        for e in &self.entries {
            counts[e.row] += 1;
        }
        counts
    }

    pub fn check_invariants(&self) -> bool {
        self.entries.windows(2).all(|w| (w[0].row, w[0].col) < (w[1].row, w[1].col))
            && self
                .entries
                .iter()
                .all(|e| e.row < self.rows && e.col < self.cols && e.value_index == e.row * self.cols + e.col)
    }
}

pub fn build_sparse_queue(src: QueueSource<'_>, rows: usize, cols: usize) -> Result<SparseQueue, SimError> {
    let out_of_range = |row, col| SimError::QueueIndex { row, col, rows, cols };
    let mut kept = Vec::new();
    let coords: Vec<(usize, usize)> = match src {
        QueueSource::Mask(mask) => {
            if mask.len() != rows * cols {
                return Err(SimError::ShapeMismatch(format!(
                    "mask has {} entries for {rows}x{cols}",
                    mask.len()
                )));
            }
            (0..rows * cols).filter(|&i| mask[i]).map(|i| (i / cols, i % cols)).collect()
        }
        QueueSource::Kept(list) => {
            let mut seen = BTreeSet::new();
            for &t in list {
                if t >= rows || t >= cols {
                    return Err(out_of_range(t, t));
                }
                if !seen.insert(t) {
                    return Err(SimError::QueueDuplicate(t, t));
                }
            }
            kept = seen.iter().copied().collect();
            kept.iter().flat_map(|&r| kept.iter().map(move |&c| (r, c))).collect()
        }
        QueueSource::Coords(list) => {
            let mut sorted = list.to_vec();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                if w[0] == w[1] {
                    return Err(SimError::QueueDuplicate(w[0].0, w[0].1));
                }
            }
            if let Some(&(r, c)) = sorted.iter().find(|&&(r, c)| r >= rows || c >= cols) {
                return Err(out_of_range(r, c));
            }
            sorted
        }
    };
    Ok(SparseQueue {
        rows,
        cols,
        entries: coords
            .into_iter()
            .map(|(row, col)| QueueEntry {
                row,
                col,
                value_index: row * cols + col,
            })
            .collect(),
        kept,
    })
}

fn check_queue<S: Real>(a: &QTensor<S>, b: &QTensor<S>, q: &SparseQueue, op: SparseOp) -> Result<(), SimError> {
    if a.cols != b.rows {
        return Err(SimError::ShapeMismatch(format!(
            "inner extents {} and {} differ",
            a.cols, b.rows
        )));
    }
    let (rows, cols) = match op {
        SparseOp::Sddmm => (a.rows, b.cols),
        SparseOp::Spmm => (a.rows, a.cols),
    };
    if q.rows != rows || q.cols != cols {
        return Err(SimError::ShapeMismatch(format!(
            "queue covers {}x{} but operands need {rows}x{cols}",
            q.rows, q.cols
        )));
    }
    Ok(())
}

/// Functional masked product shared by both sparse modes. `reduce` folds the
/// products of one output position.
fn masked_product<S: Real>(
    a: &QTensor<S>,
    b: &QTensor<S>,
    q: &SparseQueue,
    op: SparseOp,
    reduce: impl Fn(&[i32]) -> i32,
) -> AccTensor<S> {
    let mut out = AccTensor::zeros(a.rows, b.cols, a.scale * b.scale);
    let mut terms = Vec::new();
    match op {
        SparseOp::Sddmm => {
            let bt = b.transpose();
            for e in &q.entries {
                terms.clear();
                terms.extend(a.row(e.row).iter().zip(bt.row(e.col)).map(|(&x, &y)| x as i32 * y as i32));
                out.set(e.row, e.col, reduce(&terms));
            }
        }
        SparseOp::Spmm => {
            let mut start = 0;
            while start < q.entries.len() {
                let row = q.entries[start].row;
                let end = start + q.entries[start..].iter().take_while(|e| e.row == row).count();
                let group = &q.entries[start..end];
                for j in 0..b.cols {
                    terms.clear();
                    terms.extend(group.iter().map(|e| a.get(row, e.col) as i32 * b.get(e.col, j) as i32));
                    out.set(row, j, reduce(&terms));
                }
                start = end;
            }
        }
    }
    out
}

fn inner_extent<S: Real>(a: &QTensor<S>, b: &QTensor<S>, op: SparseOp) -> usize {
    match op {
        SparseOp::Sddmm => a.cols,
        SparseOp::Spmm => b.cols,
    }
}

/// Row SIMD: active operands of a row issue `C_S` at a time.
pub fn exec_simd_row<S: Real>(
    a: &QTensor<S>,
    b: &QTensor<S>,
    q: &SparseQueue,
    op: SparseOp,
    arr: &ArrayConfig,
) -> Result<(AccTensor<S>, CycleReport), SimError> {
    check_queue(a, b, q, op)?;
    // lanes accumulate sequentially
    let out = masked_product(a, b, q, op, |t| t.iter().sum());
    let rep = cycles::simd_row(&q.row_counts(), inner_extent(a, b, op), arr);
    Ok((out, rep))
}

/// Adder trees of `g` leaves; partial sums recombine through further tree slots.
pub fn exec_radt<S: Real>(
    a: &QTensor<S>,
    b: &QTensor<S>,
    q: &SparseQueue,
    op: SparseOp,
    part: RadtPartition,
    arr: &ArrayConfig,
) -> Result<(AccTensor<S>, CycleReport), SimError> {
    check_queue(a, b, q, op)?;
    let g = part.group_width.max(2);
    if part.group_width > arr.cols {
        return Err(SimError::ShapeMismatch(format!(
            "group width {} exceeds array width {}",
            part.group_width, arr.cols
        )));
    }
    let out = masked_product(a, b, q, op, |terms| tree_reduce(terms, g));
    let inner = inner_extent(a, b, op);
    let counts = q.row_counts();
    let groups = match op {
        SparseOp::Sddmm => cycles::radt_groups_sddmm(q.len(), inner, g),
        SparseOp::Spmm => cycles::radt_groups_spmm(&counts, inner, g),
    };
    let macs = q.len() as u64 * inner as u64;
    Ok((out, cycles::radt(groups, g, macs, arr)))
}

/// Pairwise tree reduction in `g`-wide groups, repeated until one value remains.
pub fn tree_reduce(terms: &[i32], g: usize) -> i32 {
    let mut level: Vec<i32> = terms.to_vec();
    if level.is_empty() {
        return 0;
    }
    while level.len() > 1 {
        level = level
            .chunks(g)
            .map(|chunk| {
                let mut v = chunk.to_vec();
                while v.len() > 1 {
                    v = v.chunks(2).map(|p| p.iter().sum()).collect();
                }
                v[0]
            })
            .collect();
    }
    level[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::systolic::{exec_systolic, SystolicVariant, Tiling};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> QTensor<f64> {
        QTensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen()).collect(), 0.5).unwrap()
    }

    #[test]
    fn empty_queue() {
        let arr = ArrayConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (random(4, 5, &mut rng), random(5, 3, &mut rng));
        let q = build_sparse_queue(QueueSource::Coords(&[]), 4, 5).unwrap();
        let (out, rep) = exec_simd_row(&a, &b, &q, SparseOp::Spmm, &arr).unwrap();
        assert!(out.data.iter().all(|&v| v == 0));
        assert_eq!(rep.stream, 0);
    }

    #[test]
    fn dense_mask_matches_systolic() {
        let arr = ArrayConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(20, 24, &mut rng), random(24, 12, &mut rng));
        let (dense, _) = exec_systolic(&a, &b, SystolicVariant::Os, Tiling::for_array(&arr, 24), &arr).unwrap();
        let spmm_q = build_sparse_queue(QueueSource::Mask(&[true; 20 * 24]), 20, 24).unwrap();
        assert_eq!(exec_simd_row(&a, &b, &spmm_q, SparseOp::Spmm, &arr).unwrap().0, dense);
        let sddmm_q = build_sparse_queue(QueueSource::Mask(&[true; 20 * 12]), 20, 12).unwrap();
        assert_eq!(exec_simd_row(&a, &b, &sddmm_q, SparseOp::Sddmm, &arr).unwrap().0, dense);
        let part = RadtPartition::new(8, &arr);
        assert_eq!(exec_radt(&a, &b, &sddmm_q, SparseOp::Sddmm, part, &arr).unwrap().0, dense);
    }

    #[test]
    fn star_graph_groups() {
        let arr = ArrayConfig::default();
        let mut coords: Vec<(usize, usize)> = (1..104).map(|c| (0, c)).collect();
        coords.extend((1..104).map(|r| (r, 0)));
        let q = build_sparse_queue(QueueSource::Coords(&coords), 104, 104).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(104, 104, &mut rng), random(104, 16, &mut rng));
        let (_, rep) = exec_simd_row(&a, &b, &q, SparseOp::Spmm, &arr).unwrap();
        // hub: ceil(103/32) groups; every leaf: one group
        let groups = 103u64.div_ceil(32) + 103;
        assert_eq!(rep.fill, groups);
        assert_eq!(rep.stream, groups * 16u64.div_ceil(32));
    }

    #[test]
    fn single_row_radt() {
        let arr = ArrayConfig::default();
        let a = QTensor::new(1, 4, vec![1, 2, 3, 0], 1.0f64).unwrap();
        let b = QTensor::new(4, 1, vec![4, 5, 6, 7], 1.0f64).unwrap();
        let q = build_sparse_queue(QueueSource::Coords(&[(0, 0), (0, 1), (0, 2)]), 1, 4).unwrap();
        let (out, rep) = exec_radt(&a, &b, &q, SparseOp::Spmm, RadtPartition::new(4, &arr), &arr).unwrap();
        assert_eq!(out.data, vec![4 + 10 + 18]);
        assert_eq!(rep.stream, 1);
    }

    #[test]
    fn kept_list_equals_mask() {
        let kept = [4usize, 0, 7];
        let from_kept = build_sparse_queue(QueueSource::Kept(&kept), 9, 9).unwrap();
        let mut mask = vec![false; 81];
        for &r in &kept {
            for &c in &kept {
                mask[r * 9 + c] = true;
            }
        }
        let from_mask = build_sparse_queue(QueueSource::Mask(&mask), 9, 9).unwrap();
        assert_eq!(from_kept.entries, from_mask.entries);
        assert_eq!(from_kept.kept, vec![0, 4, 7]);
        assert!(from_kept.check_invariants());
    }

    #[test]
    fn bad_queues() {
        assert!(matches!(
            build_sparse_queue(QueueSource::Coords(&[(1, 1), (1, 1)]), 2, 2),
            Err(SimError::QueueDuplicate(1, 1))
        ));
        assert!(matches!(
            build_sparse_queue(QueueSource::Coords(&[(2, 0)]), 2, 2),
            Err(SimError::QueueIndex { .. })
        ));
        assert!(build_sparse_queue(QueueSource::Kept(&[3]), 2, 2).is_err());
    }

    #[test]
    fn tree_reduce_sums() {
        let t: Vec<i32> = (1..=37).collect();
        for g in [2, 4, 8, 32] {
            assert_eq!(tree_reduce(&t, g), 37 * 38 / 2);
        }
    }
}
