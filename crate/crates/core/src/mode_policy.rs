//! Execution-mode selection for the mode-switchable engine.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{ArrayConfig, PolicyConfig, TopkConfig};
use crate::kernel_ir::{Kernel, KernelKind, SparsityProfile};
use crate::model_spec::DataflowHint;
use crate::sim::{cycles, timing};

/// Homogeneous adder-tree partition: `group_width` leaves per tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RadtPartition {
    pub group_width: usize,
    pub trees_per_pass: usize,
}

impl RadtPartition {
    pub fn new(group_width: usize, arr: &ArrayConfig) -> Self {
        RadtPartition {
            group_width,
            trees_per_pass: cycles::radt_trees(group_width, arr) as usize,
        }
    }

    /// `g` in `{2, 4, ..., C_S}`.
    pub fn candidates(arr: &ArrayConfig) -> Vec<RadtPartition> {
        let mut out = Vec::new();
        let mut g = 2;
        while g <= arr.cols {
            out.push(RadtPartition::new(g, arr));
            g *= 2;
        }
        if out.is_empty() {
            out.push(RadtPartition::new(arr.cols.max(1), arr));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MseMode {
    SystolicWs,
    SystolicOs,
    SimdRow,
    Radt(RadtPartition),
    SimdElementwise,
    /// Dedicated top-k side unit; the array keeps its current mode.
    TopkUnit,
}

impl MseMode {
    pub fn is_systolic(&self) -> bool {
        matches!(self, MseMode::SystolicWs | MseMode::SystolicOs)
    }
}

impl fmt::Display for MseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MseMode::SystolicWs => write!(f, "WS"),
            MseMode::SystolicOs => write!(f, "OS"),
            MseMode::SimdRow => write!(f, "SIMD_ROW"),
            MseMode::Radt(p) => write!(f, "RADT(g={})", p.group_width),
            MseMode::SimdElementwise => write!(f, "SIMD_EW"),
            MseMode::TopkUnit => write!(f, "TOPK"),
        }
    }
}

/// A mode together with the reasoning behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDecision {
    pub mode: MseMode,
    pub reason: String,
    pub estimated_cycles: u64,
}

/// Estimated per-row active counts of a sparse kernel and the inner extent
/// each active position carries.
pub fn estimated_rows(kern: &Kernel, profile: &SparsityProfile) -> (Vec<usize>, usize) {
    let (n, m, k) = kern.shape.est();
    let total = (profile.per_row_activity * n as f64).round().max(0.0) as usize;
    let cap = if kern.kind == KernelKind::Sddmm { m } else { k };
    let rows = (0..n)
        .map(|r| (total / n.max(1) + usize::from(r < total % n.max(1))).min(cap))
        .collect();
    let inner = if kern.kind == KernelKind::Sddmm { k } else { m };
    (rows, inner)
}

/// Analytic cycle estimate of a kernel in `mode`, at estimated extents.
pub fn estimate_cycles(kern: &Kernel, mode: &MseMode, arr: &ArrayConfig) -> u64 {
    timing::kernel_cycles(kern, mode, arr, &TopkConfig::default(), None).total
}

/// Picks the adder-tree partition with the lowest estimated cycles; ties go
/// to the smaller group width.
pub fn score_radt_partitions(kern: &Kernel, arr: &ArrayConfig) -> RadtPartition {
    let mut best: Option<(u64, RadtPartition)> = None;
    for cand in RadtPartition::candidates(arr) {
        let c = estimate_cycles(kern, &MseMode::Radt(cand), arr);
        if best.is_none_or(|(b, _)| c < b) {
            best = Some((c, cand));
        }
    }
    best.expect("candidate list is never empty").1
}

pub fn select_mode(kern: &Kernel, arr: &ArrayConfig, policy: &PolicyConfig) -> MseMode {
    decide(kern, arr, policy).mode
}

/// [`select_mode`] plus a human-readable justification.
pub fn decide(kern: &Kernel, arr: &ArrayConfig, policy: &PolicyConfig) -> ModeDecision {
    let done = |mode: MseMode, reason: String| ModeDecision {
        estimated_cycles: estimate_cycles(kern, &mode, arr),
        mode,
        reason,
    };
    match kern.kind {
        KernelKind::TopK => done(MseMode::TopkUnit, "top-k side unit".into()),
        KernelKind::Elementwise | KernelKind::Nonlinear(_) => {
            done(MseMode::SimdElementwise, "element-wise/nonlinear".into())
        }
        KernelKind::Ddmm => decide_dense(kern, arr, policy),
        KernelKind::Sddmm | KernelKind::Spmm => {
            let Some(p) = kern.sparsity.as_ref() else {
                return done(MseMode::SimdRow, "no sparsity profile; treated as dense rows".into());
            };
            let need = policy.alpha * arr.cols as f64;
            if p.per_row_activity >= need && p.skew <= policy.sigma_max {
                done(
                    MseMode::SimdRow,
                    format!(
                        "activity {:.1} >= {:.1} and skew {:.2} <= {:.2}",
                        p.per_row_activity, need, p.skew, policy.sigma_max
                    ),
                )
            } else {
                let part = score_radt_partitions(kern, arr);
                done(
                    MseMode::Radt(part),
                    format!(
                        "activity {:.1} vs {:.1}, skew {:.2} vs {:.2}; best g={}",
                        p.per_row_activity, need, p.skew, policy.sigma_max, part.group_width
                    ),
                )
            }
        }
    }
}

fn decide_dense(kern: &Kernel, arr: &ArrayConfig, policy: &PolicyConfig) -> ModeDecision {
    let (n, m, _) = kern.shape.est();
    let ratio = if m == 0 { f64::INFINITY } else { n as f64 / m as f64 };
    let ws = estimate_cycles(kern, &MseMode::SystolicWs, arr);
    let os = estimate_cycles(kern, &MseMode::SystolicOs, arr);
    let (rule, alt, c_rule, c_alt) = if ratio >= policy.theta_ws {
        (MseMode::SystolicWs, MseMode::SystolicOs, ws, os)
    } else {
        (MseMode::SystolicOs, MseMode::SystolicWs, os, ws)
    };
    let tol = policy.ws_os_tie_tolerance;
    let base = format!("n/m={ratio:.2} vs theta={:.2}; WS~{ws} OS~{os}", policy.theta_ws);
    let pick = |mode: MseMode, why: &str| ModeDecision {
        estimated_cycles: if mode == MseMode::SystolicWs { ws } else { os },
        mode,
        reason: format!("{base}; {why}"),
    };
    if c_rule as f64 > c_alt as f64 * (1.0 + tol) {
        return pick(alt, "cost guard overrides shape rule");
    }
    let tied = (c_rule.abs_diff(c_alt)) as f64 <= tol * c_rule.min(c_alt) as f64;
    match (tied, kern.hint) {
        (true, Some(DataflowHint::PreferWS)) => pick(MseMode::SystolicWs, "tie, hint WS"),
        (true, Some(DataflowHint::PreferOS)) => pick(MseMode::SystolicOs, "tie, hint OS"),
        _ => pick(rule, "shape rule"),
    }
}

/// Re-evaluates the policy against an observed profile.
pub fn runtime_mode_flip(
    mode: MseMode,
    observed: &SparsityProfile,
    kern: &Kernel,
    arr: &ArrayConfig,
    policy: &PolicyConfig,
) -> MseMode {
    if !kern.kind.is_sparse() {
        return mode;
    }
    let mut k = kern.clone();
    k.sparsity = Some(observed.clone());
    select_mode(&k, arr, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_ir::{KernelShape, Operand, SparsitySource};
    use proptest::prelude::*;

    fn sparse(kind: KernelKind, n: usize, m: usize, k: usize, act: f64, skew: f64) -> Kernel {
        let mut kern = Kernel {
            id: "s".into(),
            kind,
            shape: KernelShape::fixed(n, m, k),
            sparsity: None,
            inputs: vec![Operand::act("x")],
            output: "y".into(),
            out_rows: crate::kernel_ir::Extent::fixed(n),
            out_cols: m,
            topk: None,
            heads: None,
            mask: None,
            stream_len: None,
            prune: None,
            scale_mul: 1.0,
            hint: None,
            origin_layer: "l".into(),
        };
        let row_len = if kind == KernelKind::Sddmm { m } else { k };
        kern.sparsity = Some(SparsityProfile {
            p: 1.0 - act / row_len as f64,
            per_row_activity: act,
            skew,
            source: SparsitySource::Static,
            row_len,
        });
        kern
    }

    fn dense(n: usize, m: usize, k: usize, hint: Option<DataflowHint>) -> Kernel {
        let mut kern = sparse(KernelKind::Ddmm, n, m, k, 0.0, 0.0);
        kern.sparsity = None;
        kern.hint = hint;
        kern
    }

    #[test]
    fn vit_projection_is_os_and_within_tolerance() {
        let arr = ArrayConfig::default();
        let pol = PolicyConfig::default();
        let k = dense(197, 192, 192, None);
        let mode = select_mode(&k, &arr, &pol);
        assert_eq!(mode, MseMode::SystolicOs);
        let os = estimate_cycles(&k, &MseMode::SystolicOs, &arr) as f64;
        let ws = estimate_cycles(&k, &MseMode::SystolicWs, &arr) as f64;
        assert!(os <= ws * (1.0 + pol.ws_os_tie_tolerance));
    }

    #[test]
    fn hint_breaks_ties_only() {
        let arr = ArrayConfig::default();
        let pol = PolicyConfig::default();
        let tied = dense(197, 192, 192, Some(DataflowHint::PreferWS));
        assert_eq!(select_mode(&tied, &arr, &pol), MseMode::SystolicWs);
        // tall-skinny: WS clearly cheaper, an OS hint must not win
        let tall = dense(4096, 32, 32, Some(DataflowHint::PreferOS));
        assert_eq!(select_mode(&tall, &arr, &pol), MseMode::SystolicWs);
    }

    #[test]
    fn dense_rows_use_simd() {
        let arr = ArrayConfig::default();
        let k = sparse(KernelKind::Spmm, 64, 64, 64, 28.0, 0.0);
        assert_eq!(select_mode(&k, &arr, &PolicyConfig::default()), MseMode::SimdRow);
    }

    #[test]
    fn skewed_rows_use_radt() {
        let arr = ArrayConfig::default();
        let k = sparse(KernelKind::Spmm, 104, 64, 104, 28.0, 5.0);
        assert!(matches!(select_mode(&k, &arr, &PolicyConfig::default()), MseMode::Radt(_)));
    }

    #[test]
    fn partition_examples() {
        let arr = ArrayConfig::default();
        let small = sparse(KernelKind::Spmm, 128, 64, 128, 3.0, 0.0);
        assert_eq!(score_radt_partitions(&small, &arr).group_width, 4);
        let full = sparse(KernelKind::Spmm, 128, 64, 128, 32.0, 0.0);
        assert_eq!(score_radt_partitions(&full, &arr).group_width, 32);
        assert_eq!(RadtPartition::candidates(&arr).len(), 5);
    }

    #[test]
    fn flips() {
        let arr = ArrayConfig::default();
        let pol = PolicyConfig::default();
        let k = sparse(KernelKind::Spmm, 64, 64, 64, 28.0, 0.0);
        let est = k.sparsity.clone().unwrap();
        assert_eq!(runtime_mode_flip(MseMode::SimdRow, &est, &k, &arr, &pol), MseMode::SimdRow);
        let collapsed = SparsityProfile {
            per_row_activity: 3.0,
            source: SparsitySource::RuntimeObserved,
            ..est.clone()
        };
        assert!(matches!(
            runtime_mode_flip(MseMode::SimdRow, &collapsed, &k, &arr, &pol),
            MseMode::Radt(_)
        ));
        let dense_again = SparsityProfile {
            per_row_activity: 30.0,
            source: SparsitySource::RuntimeObserved,
            ..est
        };
        let radt = MseMode::Radt(RadtPartition::new(4, &arr));
        assert_eq!(runtime_mode_flip(radt, &dense_again, &k, &arr, &pol), MseMode::SimdRow);
    }

    proptest! {
        #[test]
        fn skew_is_monotone(act in 0.0f64..64.0, s1 in 0.0f64..3.0, ds in 0.0f64..3.0) {
            let arr = ArrayConfig::default();
            let pol = PolicyConfig::default();
            let a = select_mode(&sparse(KernelKind::Spmm, 64, 32, 64, act, s1), &arr, &pol);
            let b = select_mode(&sparse(KernelKind::Spmm, 64, 32, 64, act, s1 + ds), &arr, &pol);
            if matches!(a, MseMode::Radt(_)) {
                prop_assert!(matches!(b, MseMode::Radt(_)));
            }
        }

        #[test]
        fn scorer_matches_exhaustive(n in 1usize..200, m in 1usize..128, k in 1usize..300, frac in 0.0f64..1.0, sddmm: bool) {
            let arr = ArrayConfig::default();
            let kind = if sddmm { KernelKind::Sddmm } else { KernelKind::Spmm };
            let cap = if sddmm { m } else { k };
            let kern = sparse(kind, n, m, k, frac * cap as f64, 0.0);
            let got = score_radt_partitions(&kern, &arr);
            let costs: Vec<(u64, usize)> = [2, 4, 8, 16, 32]
                .iter()
                .map(|&g| (estimate_cycles(&kern, &MseMode::Radt(RadtPartition::new(g, &arr)), &arr), g))
                .collect();
            let best = costs.iter().min().unwrap();
            prop_assert_eq!(got.group_width, best.1);
        }

        #[test]
        fn dense_choice_within_tolerance(n in 1usize..2048, m in 1usize..1024, k in 1usize..1024) {
            let arr = ArrayConfig::default();
            let pol = PolicyConfig::default();
            let kern = dense(n, m, k, None);
            let mode = select_mode(&kern, &arr, &pol);
            let other = if mode == MseMode::SystolicWs { MseMode::SystolicOs } else { MseMode::SystolicWs };
            let c = estimate_cycles(&kern, &mode, &arr) as f64;
            let o = estimate_cycles(&kern, &other, &arr) as f64;
            prop_assert!(c <= o * (1.0 + pol.ws_os_tie_tolerance));
        }
    }
}
