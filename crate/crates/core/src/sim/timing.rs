//! Cycle cost of a whole kernel in a given mode. Shared by the compiler's
//! estimates and the runtime so both always agree.

use super::cycles::{self, CycleReport};
use crate::config::{ArrayConfig, TopkConfig};
use crate::kernel_ir::{Kernel, KernelKind, SparsityProfile, SparsitySource};
use crate::mode_policy::{estimated_rows, MseMode};

/// Cycles of `kern` at its estimated (or bound) extents. `rows` overrides the
/// per-row active counts of a sparse kernel with observed ones.
pub fn kernel_cycles(
    kern: &Kernel,
    mode: &MseMode,
    arr: &ArrayConfig,
    topk: &TopkConfig,
    rows: Option<&[usize]>,
) -> CycleReport {
    let (n, m, k) = kern.shape.est();
    let one = match kern.kind {
        KernelKind::TopK => {
            let (keep, w) = kern.topk.as_ref().map_or((1, arr.cols), |t| (t.keep.est, t.width));
            cycles::topk_passes(m, keep.clamp(1, m.max(1)), w, topk, (m * k) as u64, arr)
        }
        KernelKind::Nonlinear(nk) => cycles::nonlinear(nk, n, m, arr),
        KernelKind::Elementwise => cycles::elementwise(n, m, arr),
        KernelKind::Ddmm => match mode {
            MseMode::SystolicWs => cycles::systolic_ws(n, m, k, k.min(arr.rf_depth), arr),
            _ => cycles::systolic_os(n, m, k, arr),
        },
        KernelKind::Sddmm | KernelKind::Spmm => {
            let dense_rows;
            let (counts, inner) = match rows {
                Some(r) => (r, if kern.kind == KernelKind::Sddmm { k } else { m }),
                None => {
                    let profile = kern.sparsity.clone().unwrap_or_else(|| dense_profile(kern));
                    let (r, inner) = estimated_rows(kern, &profile);
                    dense_rows = r;
                    (&dense_rows[..], inner)
                }
            };
            let macs = counts.iter().map(|&c| c as u64).sum::<u64>() * inner as u64;
            match mode {
                MseMode::Radt(p) => {
                    let g = p.group_width;
                    let groups = if kern.kind == KernelKind::Sddmm {
                        cycles::radt_groups_sddmm(counts.iter().sum(), inner, g)
                    } else {
                        cycles::radt_groups_spmm(counts, inner, g)
                    };
                    cycles::radt(groups, g, macs, arr)
                }
                _ => cycles::simd_row(counts, inner, arr),
            }
        }
    };
    one.scaled(kern.head_count() as u64)
}

fn dense_profile(kern: &Kernel) -> SparsityProfile {
    let (_, m, k) = kern.shape.est();
    let len = if kern.kind == KernelKind::Sddmm { m } else { k };
    SparsityProfile {
        p: 0.0,
        per_row_activity: len as f64,
        skew: 0.0,
        source: SparsitySource::Static,
        row_len: len,
    }
}
