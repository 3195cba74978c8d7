//! Instruction blocks, the block DAG and static placement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::{Capability, HardwareConfig, TopkConfig};
use crate::error::CompileError;
use crate::kernel_ir::{
    lower_graph, Kernel, KernelKind, LowerOptions, SymbolDef, TensorRef,
};
use crate::mode_policy::{decide, MseMode};
use crate::model_spec::{render_model, ModelGraph, PruneRequest};
use crate::sim::systolic::Tiling;
use crate::sim::timing::kernel_cycles;

/// Format tag written into compiled program files.
pub const PROGRAM_FORMAT: &str = "trine-program/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trips {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub prune: PruneRequest,
    /// Buffers the scores are computed from.
    pub score_source: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionBlock {
    pub block_id: usize,
    pub name: String,
    pub mode: MseMode,
    pub mode_reason: String,
    pub tiling: Tiling,
    pub trips: Trips,
    pub kernel: Kernel,
    pub reads: Vec<String>,
    pub writes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruneOptions>,
    pub deps: Vec<usize>,
    pub template: bool,
    pub unbound: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_hint: Option<(usize, usize)>,
    pub est_cycles: u64,
    pub requires: Capability,
}

impl InstructionBlock {
    pub fn output_bytes(&self) -> u64 {
        (self.kernel.out_rows.est * self.kernel.out_cols) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramDag {
    pub model: String,
    pub blocks: Vec<InstructionBlock>,
    pub edges: Vec<(usize, usize)>,
    pub entries: Vec<usize>,
    pub exits: Vec<usize>,
    pub symbols: BTreeMap<String, SymbolDef>,
    pub inputs: Vec<TensorRef>,
    pub outputs: Vec<TensorRef>,
}

impl ProgramDag {
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.blocks.len()];
        for &(a, b) in &self.edges {
            succ[a].push(b);
        }
        succ
    }

    pub fn total_est_cycles(&self) -> u64 {
        self.blocks.iter().map(|b| b.est_cycles).sum()
    }

    /// Longest estimated path through the DAG.
    pub fn critical_path_est(&self) -> u64 {
        let mut finish = vec![0u64; self.blocks.len()];
        for b in &self.blocks {
            let start = b.deps.iter().map(|&d| finish[d]).max().unwrap_or(0);
            finish[b.block_id] = start + b.est_cycles;
        }
        finish.into_iter().max().unwrap_or(0)
    }
}

/// Where a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Pinned { row: usize, col: usize },
    /// Any capable RPU; the runtime decides.
    Floating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub grid: (usize, usize),
    /// Indexed by block id.
    pub slots: Vec<Slot>,
    /// Static assignment for every block, used as a hint for floating ones.
    pub assigned: Vec<(usize, usize)>,
}

impl Placement {
    pub fn pinned_rpu(&self, block: usize, grid_cols: usize) -> Option<usize> {
        match self.slots[block] {
            Slot::Pinned { row, col } => Some(row * grid_cols + col),
            Slot::Floating => None,
        }
    }
}

/// A compiled program as written to `.trine.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledProgram {
    pub format: String,
    pub hw: HardwareConfig,
    pub dag: ProgramDag,
    pub placement: Placement,
}

impl CompiledProgram {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("programs serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CompileError> {
        let p: CompiledProgram = serde_json::from_str(text)
            .map_err(|e| CompileError::InvalidDag(format!("unreadable program: {e}")))?;
        if p.format != PROGRAM_FORMAT {
            return Err(CompileError::InvalidDag(format!("unknown program format `{}`", p.format)));
        }
        validate_dag(&p.dag).map_err(|d| CompileError::InvalidDag(d.join("; ")))?;
        Ok(p)
    }
}

pub fn lower_options(hw: &HardwareConfig) -> LowerOptions {
    LowerOptions {
        head_fanout_cap: hw.policy.head_fanout_cap,
        array_width: hw.array.cols,
        default_graph_skew: hw.policy.default_graph_skew,
    }
}

fn requirements(kern: &Kernel) -> Capability {
    Capability {
        topk: kern.kind == KernelKind::TopK,
        nonlinear: matches!(kern.kind, KernelKind::Nonlinear(_)),
    }
}

fn working_set(tiling: &Tiling, kind: KernelKind) -> u64 {
    let (n, m, k) = (tiling.t_n as u64, tiling.t_m as u64, tiling.t_k as u64);
    match kind {
        // one row of int32 values plus its int8 output
        KernelKind::Nonlinear(_) => m * 5,
        // score store (value + index) plus one batch
        KernelKind::TopK => 12 * (n + m) + k,
        KernelKind::Elementwise => 3 * n * m,
        _ => n * k + k * m + 4 * n * m,
    }
}

/// Array-matched tiles with the reduction depth halved until the working set
/// fits the local buffer.
pub fn choose_tiling(
    name: &str,
    kern: &Kernel,
    mode: &MseMode,
    hw: &HardwareConfig,
) -> Result<(Tiling, Trips), CompileError> {
    let arr = &hw.array;
    let (n, m, k) = kern.shape.est();
    let mut t = match kern.kind {
        KernelKind::Nonlinear(_) => Tiling { t_n: 1, t_m: m.max(1), t_k: 1 },
        KernelKind::Elementwise => Tiling { t_n: arr.rows, t_m: arr.cols, t_k: 1 },
        KernelKind::TopK => Tiling {
            t_n: kern.topk.as_ref().map_or(1, |p| p.keep.est.min(hw.topk.max_k)),
            t_m: kern.topk.as_ref().map_or(arr.cols, |p| p.width),
            t_k: k.max(1),
        },
        _ => {
            let t_n = match mode {
                MseMode::Radt(p) => p.trees_per_pass,
                _ => arr.rows,
            };
            Tiling {
                t_n,
                t_m: arr.cols,
                t_k: k.clamp(1, arr.rf_depth),
            }
        }
    };
    let reducible = !matches!(kern.kind, KernelKind::Nonlinear(_) | KernelKind::Elementwise | KernelKind::TopK);
    while working_set(&t, kern.kind) > hw.local_buffer_bytes {
        if reducible && t.t_k > 1 {
            t.t_k /= 2;
        } else {
            return Err(CompileError::NoLegalTiling {
                block: name.to_string(),
                buffer: hw.local_buffer_bytes,
            });
        }
    }
    let trips = Trips {
        n: n.div_ceil(t.t_n.max(1)),
        m: m.div_ceil(t.t_m.max(1)),
        k: k.div_ceil(t.t_k.max(1)),
    };
    Ok((t, trips))
}

/// Mode, tiling, cost and template status of one kernel.
pub fn build_block(
    block_id: usize,
    kern: Kernel,
    hw: &HardwareConfig,
) -> Result<InstructionBlock, CompileError> {
    let decision = decide(&kern, &hw.array, &hw.policy);
    build_block_with_mode(block_id, kern, decision.mode, decision.reason, hw)
}

pub fn build_block_with_mode(
    block_id: usize,
    kern: Kernel,
    mode: MseMode,
    reason: String,
    hw: &HardwareConfig,
) -> Result<InstructionBlock, CompileError> {
    let (tiling, trips) = choose_tiling(&kern.id, &kern, &mode, hw)?;
    let est = kernel_cycles(&kern, &mode, &hw.array, &hw.topk, None).total;
    let unbound = kern.symbols();
    let pruning = kern.topk.as_ref().map(|t| PruneOptions {
        prune: t.prune,
        score_source: kern.reads(),
    });
    Ok(InstructionBlock {
        block_id,
        name: kern.id.clone(),
        mode,
        mode_reason: reason,
        tiling,
        trips,
        reads: kern.reads(),
        writes: kern.output.clone(),
        pruning,
        deps: Vec::new(),
        template: !unbound.is_empty(),
        unbound,
        placement_hint: None,
        est_cycles: est,
        requires: requirements(&kern),
        kernel: kern,
    })
}

/// Lowers, tiles and places a model for `hw`.
pub fn compile(g: &ModelGraph, hw: &HardwareConfig) -> Result<CompiledProgram, CompileError> {
    hw.validate()?;
    g.validate()?;
    let lowered = lower_graph(g, &lower_options(hw))?;
    let inputs: BTreeSet<&str> = lowered.inputs.iter().map(|t| t.buf.as_str()).collect();
    let mut writer: BTreeMap<String, usize> = BTreeMap::new();
    let mut blocks = Vec::with_capacity(lowered.kernels.len());
    for (id, kern) in lowered.kernels.into_iter().enumerate() {
        let mut block = build_block(id, kern, hw)?;
        let mut deps = BTreeSet::new();
        for buf in &block.reads {
            match writer.get(buf) {
                Some(&w) => {
                    deps.insert(w);
                }
                None if inputs.contains(buf.as_str()) => {}
                None => {
                    return Err(CompileError::InvalidDag(format!(
                        "block `{}` reads `{buf}` before any block writes it",
                        block.name
                    )))
                }
            }
        }
        block.deps = deps.into_iter().collect();
        if writer.insert(block.writes.clone(), id).is_some() {
            return Err(CompileError::InvalidDag(format!("buffer `{}` written twice", block.writes)));
        }
        blocks.push(block);
    }
    let mut dag = ProgramDag {
        model: render_model(g),
        edges: Vec::new(),
        entries: Vec::new(),
        exits: Vec::new(),
        blocks,
        symbols: lowered.symbols,
        inputs: lowered.inputs,
        outputs: lowered.outputs,
    };
    finish_edges(&mut dag);
    validate_dag(&dag).map_err(|d| CompileError::InvalidDag(d.join("; ")))?;
    let placement = place_static(&dag, hw)?;
    for b in &mut dag.blocks {
        if placement.slots[b.block_id] == Slot::Floating {
            b.placement_hint = Some(placement.assigned[b.block_id]);
        }
    }
    Ok(CompiledProgram {
        format: PROGRAM_FORMAT.into(),
        hw: hw.clone(),
        dag,
        placement,
    })
}

/// Recompiles `prog` from its embedded model with every pruning request set
/// to rate `p`; `p = 0` removes the requests so attention stays dense.
pub fn with_prune(prog: &CompiledProgram, p: f64) -> Result<CompiledProgram, CompileError> {
    let mut g = crate::model_spec::parse_model(&prog.dag.model)?;
    for l in &mut g.layers {
        if l.prune.is_some() {
            l.prune = (p > 0.0).then_some(PruneRequest::Rate { rate: p });
        }
    }
    compile(&g, &prog.hw)
}

/// Recomputes edges, entries and exits from the dependency tags.
pub fn finish_edges(dag: &mut ProgramDag) {
    dag.edges = dag
        .blocks
        .iter()
        .flat_map(|b| b.deps.iter().map(move |&d| (d, b.block_id)))
        .collect();
    dag.edges.sort_unstable();
    dag.entries = dag.blocks.iter().filter(|b| b.deps.is_empty()).map(|b| b.block_id).collect();
    let has_succ: BTreeSet<usize> = dag.edges.iter().map(|e| e.0).collect();
    dag.exits = dag
        .blocks
        .iter()
        .map(|b| b.block_id)
        .filter(|id| !has_succ.contains(id))
        .collect();
}

/// Topological order by Kahn's algorithm with smallest-id tie-breaking, or
/// `None` on a cycle.
pub fn topo_order(dag: &ProgramDag) -> Option<Vec<usize>> {
    let n = dag.blocks.len();
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for b in &dag.blocks {
        for &d in &b.deps {
            if d < n {
                indeg[b.block_id] += 1;
                succ[d].push(b.block_id);
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Checks tag integrity, acyclicity and define-before-use.
pub fn validate_dag(dag: &ProgramDag) -> Result<(), Vec<String>> {
    let mut diags = Vec::new();
    let n = dag.blocks.len();
    for (i, b) in dag.blocks.iter().enumerate() {
        if b.block_id != i {
            diags.push(format!("block at position {i} carries id {}", b.block_id));
        }
        for &d in &b.deps {
            if d >= n {
                diags.push(format!("block {} depends on missing block {d}", b.block_id));
            } else if d == b.block_id {
                diags.push(format!("cycle: block {} depends on itself", b.block_id));
            }
        }
        if !b.template && !b.unbound.is_empty() {
            diags.push(format!("block {} has unbound extents but is not a template", b.block_id));
        }
    }
    let Some(order) = topo_order(dag) else {
        if !diags.iter().any(|d| d.starts_with("cycle")) {
            diags.push("cycle: dependency tags do not admit a topological order".into());
        }
        return Err(diags);
    };
    let inputs: BTreeSet<&str> = dag.inputs.iter().map(|t| t.buf.as_str()).collect();
    let mut written: BTreeSet<&str> = BTreeSet::new();
    for i in order {
        let b = &dag.blocks[i];
        for r in &b.reads {
            if !inputs.contains(r.as_str()) && !written.contains(r.as_str()) {
                diags.push(format!("def-use: block {} reads `{r}` before it is written", b.block_id));
            }
        }
        if !written.insert(&b.writes) {
            diags.push(format!("buffer `{}` written twice", b.writes));
        }
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(diags)
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let p = self.0[x];
        if p == x {
            return x;
        }
        let r = self.find(p);
        self.0[x] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller id becomes the representative
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

fn capable(have: Capability, need: Capability) -> bool {
    (have.topk || !need.topk) && (have.nonlinear || !need.nonlinear)
}

/// Static placement: co-location groups first, then capability filtering,
/// then cost-descending spreading within each DAG level.
pub fn place_static(dag: &ProgramDag, hw: &HardwareConfig) -> Result<Placement, CompileError> {
    let n = dag.blocks.len();
    let rpus = hw.rpu_count();
    let mut uf = UnionFind((0..n).collect());
    let succ = dag.successors();
    for b in &dag.blocks {
        for &s in &succ[b.block_id] {
            let consumer = &dag.blocks[s];
            let topk_pair = b.kernel.kind == KernelKind::TopK && consumer.kernel.kind.is_sparse();
            if topk_pair || b.output_bytes() > hw.inter_rpu_buffer_bytes {
                uf.union(b.block_id, s);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    // longest-path level of each block
    let order = topo_order(dag).ok_or_else(|| CompileError::InvalidDag("cycle".into()))?;
    let mut level = vec![0usize; n];
    for &i in &order {
        level[i] = dag.blocks[i].deps.iter().map(|&d| level[d] + 1).max().unwrap_or(0);
    }
    struct Group {
        members: Vec<usize>,
        level: usize,
        cost: u64,
        eligible: Vec<usize>,
    }
    let mut by_level: BTreeMap<usize, Vec<Group>> = BTreeMap::new();
    for (_, members) in groups {
        let need = members.iter().fold(Capability { topk: false, nonlinear: false }, |acc, &m| {
            let r = dag.blocks[m].requires;
            Capability {
                topk: acc.topk || r.topk,
                nonlinear: acc.nonlinear || r.nonlinear,
            }
        });
        let eligible: Vec<usize> = (0..rpus).filter(|&r| capable(hw.capability(r), need)).collect();
        if eligible.is_empty() {
            let capability = if need.topk { "top-k" } else { "nonlinear" };
            return Err(CompileError::MissingCapability {
                block: dag.blocks[members[0]].name.clone(),
                capability: capability.into(),
            });
        }
        let lvl = members.iter().map(|&m| level[m]).min().unwrap_or(0);
        let cost = members.iter().map(|&m| dag.blocks[m].est_cycles).sum();
        by_level.entry(lvl).or_default().push(Group {
            members,
            level: lvl,
            cost,
            eligible,
        });
    }
    let mut slots = vec![Slot::Floating; n];
    let mut assigned = vec![(0, 0); n];
    for (_, mut gs) in by_level {
        gs.sort_by(|a, b| b.cost.cmp(&a.cost).then(a.members[0].cmp(&b.members[0])));
        let mut load = vec![0u64; rpus];
        for g in gs {
            debug_assert!(g.level < n.max(1));
            let rpu = *g
                .eligible
                .iter()
                .min_by_key(|&&r| (load[r], r))
                .expect("eligible set checked non-empty");
            load[rpu] += g.cost;
            let coord = hw.rpu_coord(rpu);
            let pin = g.members.len() > 1 || g.eligible.len() < rpus;
            for &m in &g.members {
                assigned[m] = coord;
                if pin {
                    slots[m] = Slot::Pinned {
                        row: coord.0,
                        col: coord.1,
                    };
                }
            }
        }
    }
    Ok(Placement {
        grid: (hw.grid_rows, hw.grid_cols),
        slots,
        assigned,
    })
}

/// Row ranges `[start, end)` covering `extent` in steps of `tile`.
pub fn tile_ranges(extent: usize, tile: usize) -> Vec<(usize, usize)> {
    (0..extent)
        .step_by(tile.max(1))
        .map(|s| (s, (s + tile).min(extent)))
        .collect()
}

/// Human-readable IR listing, one kernel per line.
pub fn dump_ir(dag: &ProgramDag) -> String {
    let mut out = String::new();
    for b in &dag.blocks {
        let k = &b.kernel;
        out.push_str(&format!(
            "{:>4} {:<28} {:<12} {:<22} {:<12} deps={:?}{}\n",
            b.block_id,
            b.name,
            format!("{:?}", k.kind),
            k.shape.to_string(),
            b.mode.to_string(),
            b.deps,
            if b.template { format!(" template{:?}", b.unbound) } else { String::new() }
        ));
    }
    out
}

/// Mode table with the policy's reasoning.
pub fn explain_modes(dag: &ProgramDag) -> String {
    let mut out = String::new();
    for b in &dag.blocks {
        out.push_str(&format!(
            "{:<28} {:<12} est={:<9} {}\n",
            b.name,
            b.mode.to_string(),
            b.est_cycles,
            b.mode_reason
        ));
    }
    out
}

/// Breadth-first block ids reachable from `start` (inclusive).
pub fn descendants(dag: &ProgramDag, start: usize) -> BTreeSet<usize> {
    let succ = dag.successors();
    let mut seen = BTreeSet::new();
    let mut q = VecDeque::from([start]);
    while let Some(i) = q.pop_front() {
        if seen.insert(i) {
            q.extend(succ[i].iter().copied());
        }
    }
    seen
}

/// Top-k settings in effect for a hardware config (kept for symmetry with
/// the runtime, which reads the same table).
pub fn topk_config(hw: &HardwareConfig) -> TopkConfig {
    hw.topk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{LayerKind, LayerSpec};

    fn graph(layers: Vec<LayerSpec>, edges: &[(&str, &str)], inputs: &[&str], outputs: &[&str]) -> ModelGraph {
        ModelGraph {
            name: "t".into(),
            layers,
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_linear() {
        let g = graph(
            vec![LayerSpec::new("fc", LayerKind::Linear).dim("T", 8).dim("D", 16).dim("D_out", 4)],
            &[],
            &["fc"],
            &["fc"],
        );
        let p = compile(&g, &HardwareConfig::u50()).unwrap();
        assert_eq!(p.dag.blocks.len(), 1);
        assert!(p.dag.blocks[0].deps.is_empty());
        assert!(!p.dag.blocks[0].template);
    }

    #[test]
    fn big_gemm_tiling() {
        let g = graph(
            vec![LayerSpec::new("fc", LayerKind::Linear).dim("T", 1024).dim("D", 1024).dim("D_out", 1024)],
            &[],
            &["fc"],
            &["fc"],
        );
        let p = compile(&g, &HardwareConfig::u50()).unwrap();
        let b = &p.dag.blocks[0];
        assert_eq!((b.tiling.t_n, b.tiling.t_m, b.tiling.t_k), (32, 32, 32));
        assert_eq!((b.trips.n, b.trips.m, b.trips.k), (32, 32, 32));
        // every (i, j, k) index covered exactly once
        let mut covered = 0u64;
        for (a, b2) in tile_ranges(1024, 32) {
            for (c, d) in tile_ranges(1024, 32) {
                for (e, f) in tile_ranges(1024, 32) {
                    covered += ((b2 - a) * (d - c) * (f - e)) as u64;
                }
            }
        }
        assert_eq!(covered, 1024u64.pow(3));
    }

    #[test]
    fn no_legal_tiling() {
        let mut hw = HardwareConfig::u50();
        hw.local_buffer_bytes = 100;
        let g = graph(
            vec![LayerSpec::new("fc", LayerKind::Linear).dim("T", 64).dim("D", 64).dim("D_out", 64)],
            &[],
            &["fc"],
            &["fc"],
        );
        assert!(matches!(compile(&g, &hw), Err(CompileError::NoLegalTiling { .. })));
    }

    #[test]
    fn missing_capability() {
        let mut hw = HardwareConfig::u50();
        hw.capabilities = vec![Capability { topk: true, nonlinear: false }; 4];
        let g = graph(
            vec![
                LayerSpec::new("fc", LayerKind::Linear).dim("T", 8).dim("D", 8).dim("D_out", 8),
                LayerSpec::new("act", LayerKind::Gelu),
            ],
            &[("fc", "act")],
            &["fc"],
            &["act"],
        );
        assert!(matches!(compile(&g, &hw), Err(CompileError::MissingCapability { .. })));
    }

    #[test]
    fn validate_catches_problems() {
        let g = graph(
            vec![
                LayerSpec::new("a", LayerKind::Linear).dim("T", 8).dim("D", 8).dim("D_out", 8),
                LayerSpec::new("b", LayerKind::Gelu),
            ],
            &[("a", "b")],
            &["a"],
            &["b"],
        );
        let p = compile(&g, &HardwareConfig::u50()).unwrap();
        assert!(validate_dag(&p.dag).is_ok());
        let mut cyc = p.dag.clone();
        cyc.blocks[0].deps.push(0);
        assert!(validate_dag(&cyc).unwrap_err().iter().any(|d| d.contains("cycle")));
        let mut du = p.dag.clone();
        du.blocks[1].deps.clear();
        // reorder so the reader comes first
        du.blocks.swap(0, 1);
        du.blocks[0].block_id = 0;
        du.blocks[1].block_id = 1;
        assert!(validate_dag(&du).unwrap_err().iter().any(|d| d.starts_with("def-use")));
    }

    #[test]
    fn independent_chains_spread() {
        let mk = |p: &str| {
            vec![
                LayerSpec::new(format!("{p}1"), LayerKind::Linear).dim("T", 64).dim("D", 64).dim("D_out", 64),
                LayerSpec::new(format!("{p}2"), LayerKind::Linear).dim("D", 64).dim("D_out", 64),
            ]
        };
        let mut layers = mk("a");
        layers.extend(mk("b"));
        let g = graph(layers, &[("a1", "a2"), ("b1", "b2")], &["a1", "b1"], &["a2", "b2"]);
        let hw = HardwareConfig::u50().with_grid(1, 2);
        let p = compile(&g, &hw).unwrap();
        let a = &p.placement.assigned;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn single_rpu_places_everything_at_origin() {
        let g = graph(
            vec![
                LayerSpec::new("a", LayerKind::Linear).dim("T", 8).dim("D", 8).dim("D_out", 8),
                LayerSpec::new("b", LayerKind::Softmax),
            ],
            &[("a", "b")],
            &["a"],
            &["b"],
        );
        let p = compile(&g, &HardwareConfig::zcu104()).unwrap();
        assert!(p.placement.assigned.iter().all(|&c| c == (0, 0)));
    }
}
