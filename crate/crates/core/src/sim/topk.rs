//! Two-stage streaming top-k: fixed-width bitonic batches feeding a running
//! top-k store.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use super::cycles::{self, CycleReport};
use crate::config::{ArrayConfig, TopkConfig, TopkOverflow};
use crate::error::SimError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopkResult {
    /// Selected scores, best first.
    pub values: Vec<i64>,
    /// Stream positions of `values`.
    pub indices: Vec<usize>,
}

/// Larger score first; equal scores keep the smaller index first.
fn before(a: (i64, usize), b: (i64, usize)) -> bool {
    match a.0.cmp(&b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.1 < b.1,
    }
}

/// In-place bitonic sort of a power-of-two batch into priority order.
fn bitonic_sort(v: &mut [(i64, usize)]) {
    let n = v.len();
    let mut size = 2;
    while size <= n {
        let mut stride = size / 2;
        while stride > 0 {
            for i in 0..n {
                let j = i ^ stride;
                if j > i {
                    let ascending = i & size == 0;
                    // "ascending" here means priority order
                    if before(v[j], v[i]) == ascending {
                        v.swap(i, j);
                    }
                }
            }
            stride /= 2;
        }
        size *= 2;
    }
}

/// Merges a sorted batch into the sorted store, keeping the best `k`.
fn merge_into(store: &mut Vec<(i64, usize)>, batch: &[(i64, usize)], k: usize) {
    let mut merged = Vec::with_capacity((store.len() + batch.len()).min(k));
    let (mut i, mut j) = (0, 0);
    while merged.len() < k && (i < store.len() || j < batch.len()) {
        let take_store = j >= batch.len() || (i < store.len() && before(store[i], batch[j]));
        if take_store {
            merged.push(store[i]);
            i += 1;
        } else {
            merged.push(batch[j]);
            j += 1;
        }
    }
    *store = merged;
}

fn single_pass(scores: &[(i64, usize)], k: usize, w: usize) -> Vec<(i64, usize)> {
    let mut store = Vec::with_capacity(k);
    for chunk in scores.chunks(w) {
        let mut batch = chunk.to_vec();
        // padding sorts last and is dropped
        batch.resize(w, (i64::MIN, usize::MAX));
        bitonic_sort(&mut batch);
        batch.retain(|e| e.1 != usize::MAX);
        merge_into(&mut store, &batch, k);
    }
    store
}

/// Exact top-k of `scores` with smallest-index tie-breaking.
pub fn exec_topk(
    scores: &[i64],
    k: usize,
    w: usize,
    cfg: &TopkConfig,
    score_macs: u64,
    arr: &ArrayConfig,
) -> Result<(TopkResult, CycleReport), SimError> {
    if w == 0 || !w.is_power_of_two() || w > arr.cols {
        return Err(SimError::TopKWidth(w));
    }
    let limit = match cfg.overflow {
        TopkOverflow::Chunked => scores.len(),
        TopkOverflow::Error => scores.len().min(cfg.max_k),
    };
    if k == 0 || k > limit {
        return Err(SimError::TopKRange { k, limit });
    }
    let mut remaining: Vec<(i64, usize)> = scores.iter().copied().zip(0..).collect();
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let want = (k - picked.len()).min(cfg.max_k);
        let best = single_pass(&remaining, want, w);
        let taken: BTreeSet<usize> = best.iter().map(|e| e.1).collect();
        remaining.retain(|e| !taken.contains(&e.1));
        picked.extend(best);
    }
    let report = cycles::topk_passes(scores.len(), k, w, cfg, score_macs, arr);
    Ok((
        TopkResult {
            values: picked.iter().map(|e| e.0).collect(),
            indices: picked.iter().map(|e| e.1).collect(),
        },
        report,
    ))
}
