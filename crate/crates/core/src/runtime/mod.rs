//! DALO dispatcher: list scheduling of instruction blocks over the RPU grid.
//!
//! Virtual time advances per dispatch. Among all (ready block, eligible RPU)
//! pairs the one with the earliest feasible start wins; ties go to pinned
//! blocks, then by priority (longest estimate first by default), then by id.
//! Blocks are evaluated functionally when dispatched, so outputs depend only
//! on the DAG, never on the order chosen.

pub mod bindings;
pub mod data;
pub mod exec;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use bindings::{bind_kernel, instantiate_template, RuntimeBindings};
pub use exec::{apply_pruning, Buffer};

use crate::config::{Capability, HardwareConfig, LinkConfig, Priority};
use crate::error::RuntimeError;
use crate::kernel_ir::{SparsityProfile, SparsitySource};
use crate::mode_policy::{runtime_mode_flip, MseMode};
use crate::program::{CompiledProgram, InstructionBlock, Placement, ProgramDag, Slot};
use crate::sim::cycles::{mode_switch_cost, pipeline_depth};
use crate::sim::nonlinear::NonlinearTables;
use crate::sim::timing::kernel_cycles;
use crate::sim::CycleReport;
use crate::QTensor;
use exec::{exec_block, observed_rows, ExecCtx, Store};

/// The simulated grid: capabilities, link model and occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct RpuGrid {
    pub rows: usize,
    pub cols: usize,
    pub capabilities: Vec<Capability>,
    pub link: LinkConfig,
    pub busy_until: Vec<u64>,
    pub last_mode: Vec<Option<MseMode>>,
}

impl RpuGrid {
    pub fn from_hw(hw: &HardwareConfig) -> Self {
        let n = hw.rpu_count();
        RpuGrid {
            rows: hw.grid_rows,
            cols: hw.grid_cols,
            capabilities: (0..n).map(|r| hw.capability(r)).collect(),
            link: hw.link,
            busy_until: vec![0; n],
            last_mode: vec![None; n],
        }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn transfer_cycles(&self, bytes: u64, from: usize, to: usize) -> u64 {
        transfer_cycles(&self.link, bytes, from, to)
    }
}

pub fn transfer_cycles(link: &LinkConfig, bytes: u64, from: usize, to: usize) -> u64 {
    if from == to {
        0
    } else {
        (bytes as f64 / link.bytes_per_cycle).ceil() as u64 + link.hop_latency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: usize,
    pub name: String,
    pub rpu: usize,
    pub start: u64,
    pub end: u64,
    pub mode: String,
    pub flipped: bool,
    pub pinned: bool,
    pub switch_cycles: u64,
    pub cycles: CycleReport,
    pub out_bytes: u64,
    /// RPUs the block could have used, with its data-ready time on each.
    pub ready_on: Vec<(usize, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub from_block: usize,
    pub to_block: usize,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStat {
    pub block: String,
    pub stream: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub rpus: usize,
    pub link: LinkConfig,
    /// Indexed by block id.
    pub records: Vec<BlockRecord>,
    pub dispatch_order: Vec<usize>,
    pub transfers: Vec<TransferRecord>,
    pub makespan: u64,
    pub busy: Vec<u64>,
    pub utilization: Vec<f64>,
    pub pruning: Vec<PruneStat>,
    pub mode_flips: usize,
    pub mode_switch_cycles: u64,
}

impl ScheduleTrace {
    /// `block_id,rpu,start,end,mode,flipped` rows in block order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block_id,rpu,start,end,mode,flipped\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.block_id, r.rpu, r.start, r.end, r.mode, r.flipped
            ));
        }
        s
    }

    pub fn total_work(&self) -> u64 {
        self.records.iter().map(|r| r.end - r.start).sum()
    }

    /// No two blocks overlap on one RPU.
    pub fn check_exclusive(&self) -> Result<(), String> {
        let mut per: BTreeMap<usize, Vec<(u64, u64, usize)>> = BTreeMap::new();
        for r in &self.records {
            per.entry(r.rpu).or_default().push((r.start, r.end, r.block_id));
        }
        for (rpu, mut iv) in per {
            iv.sort_unstable();
            for w in iv.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(format!("blocks {} and {} overlap on RPU {rpu}", w[0].2, w[1].2));
                }
            }
        }
        Ok(())
    }

    /// Every block starts after its predecessors end plus transfer time.
    pub fn check_dependencies(&self, dag: &ProgramDag) -> Result<(), String> {
        for b in &dag.blocks {
            let rec = &self.records[b.block_id];
            for &d in &b.deps {
                let p = &self.records[d];
                let need = p.end + transfer_cycles(&self.link, p.out_bytes, p.rpu, rec.rpu);
                if rec.start < need {
                    return Err(format!("block {} starts at {} before its input from {d} at {need}", b.block_id, rec.start));
                }
            }
        }
        Ok(())
    }

    /// No eligible RPU sat idle while a block was ready for it.
    pub fn check_work_conservation(&self) -> Result<(), String> {
        let mut per: BTreeMap<usize, Vec<(u64, u64)>> = BTreeMap::new();
        for r in &self.records {
            per.entry(r.rpu).or_default().push((r.start, r.end));
        }
        for iv in per.values_mut() {
            iv.sort_unstable();
        }
        for rec in &self.records {
            for &(rpu, ready) in &rec.ready_on {
                if ready >= rec.start {
                    continue;
                }
                // [ready, start) must be covered by busy intervals on `rpu`
                let mut t = ready;
                for &(s, e) in per.get(&rpu).map(Vec::as_slice).unwrap_or(&[]) {
                    if s <= t && e > t {
                        t = e;
                    }
                }
                if t < rec.start {
                    return Err(format!(
                        "RPU {rpu} idle at {t} while block {} was ready (started {})",
                        rec.block_id, rec.start
                    ));
                }
            }
        }
        Ok(())
    }

    /// Makespan is at least the critical path and the average load.
    pub fn check_bounds(&self, dag: &ProgramDag) -> Result<(), String> {
        let mut finish = vec![0u64; self.records.len()];
        for b in &dag.blocks {
            let r = &self.records[b.block_id];
            let s = b.deps.iter().map(|&d| finish[d]).max().unwrap_or(0);
            finish[b.block_id] = s + (r.end - r.start);
        }
        let cp = finish.iter().copied().max().unwrap_or(0);
        if self.makespan < cp {
            return Err(format!("makespan {} below critical path {cp}", self.makespan));
        }
        if self.makespan * (self.rpus as u64) < self.total_work() {
            return Err(format!("makespan {} below total work / RPUs", self.makespan));
        }
        Ok(())
    }

    pub fn validate(&self, dag: &ProgramDag) -> Result<(), String> {
        self.check_exclusive()?;
        self.check_dependencies(dag)?;
        self.check_work_conservation()?;
        self.check_bounds(dag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    /// Evaluate tensors; `false` tracks shapes and cycles only.
    pub functional: bool,
    /// Overrides the hardware config's ready-queue priority.
    pub priority: Option<Priority>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            functional: true,
            priority: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub outputs: BTreeMap<String, QTensor>,
    pub trace: ScheduleTrace,
}

/// Random tensors for every graph input at its bound extent.
pub fn random_inputs(
    dag: &ProgramDag,
    bind: &RuntimeBindings,
    seed: u64,
) -> Result<BTreeMap<String, QTensor>, RuntimeError> {
    dag.inputs
        .iter()
        .map(|t| {
            let rows = t
                .rows
                .resolve(&|s: &str| bind.get(s))
                .ok_or_else(|| RuntimeError::MissingBinding(t.rows.sym.clone().unwrap_or_default()))?;
            Ok((t.buf.clone(), data::input(seed, &t.buf, rows, t.cols)))
        })
        .collect()
}

/// Runs a compiled program on its own grid and placement.
pub fn run(
    prog: &CompiledProgram,
    inputs: &BTreeMap<String, QTensor>,
    bind: &RuntimeBindings,
    opts: &RunOptions,
) -> Result<RunResult, RuntimeError> {
    run_on(&prog.dag, &prog.placement, &prog.hw, inputs, bind, opts)
}

/// One block at a time on a single RPU: the ablation baseline.
pub fn run_sequential(
    prog: &CompiledProgram,
    inputs: &BTreeMap<String, QTensor>,
    bind: &RuntimeBindings,
    opts: &RunOptions,
) -> Result<RunResult, RuntimeError> {
    let hw = prog.hw.clone().with_grid(1, 1);
    let n = prog.dag.blocks.len();
    let placement = Placement {
        grid: (1, 1),
        slots: vec![Slot::Floating; n],
        assigned: vec![(0, 0); n],
    };
    let mut dag = prog.dag.clone();
    for b in &mut dag.blocks {
        b.placement_hint = Some((0, 0));
    }
    run_on(&dag, &placement, &hw, inputs, bind, opts)
}

/// Binds the kept count of a top-k block once its stream length is known.
fn bind_kept(bindings: &mut RuntimeBindings, block: &InstructionBlock) {
    if let Some(t) = &block.kernel.topk {
        if let (Some(sym), Some(len)) = (&t.keep.sym, t.stream.resolve(&|s: &str| bindings.get(s))) {
            if bindings.get(sym).is_none() {
                bindings.set(sym, t.prune.kept(len));
            }
        }
    }
}

fn capable(have: Capability, need: Capability) -> bool {
    (have.topk || !need.topk) && (have.nonlinear || !need.nonlinear)
}

fn drifted(est: &SparsityProfile, obs: &SparsityProfile, trigger: f64) -> bool {
    let base = est.per_row_activity.max(f64::MIN_POSITIVE);
    (obs.per_row_activity - est.per_row_activity).abs() / base > trigger || (obs.skew - est.skew).abs() > trigger
}

/// Runs `dag` with an explicit placement and hardware description.
pub fn run_on(
    dag: &ProgramDag,
    placement: &Placement,
    hw: &HardwareConfig,
    inputs: &BTreeMap<String, QTensor>,
    bind: &RuntimeBindings,
    opts: &RunOptions,
) -> Result<RunResult, RuntimeError> {
    let grid = RpuGrid::from_hw(hw);
    let rpus = grid.count();
    let n = dag.blocks.len();
    let priority = opts.priority.unwrap_or(hw.priority);
    let tables = NonlinearTables::default();
    let ctx = ExecCtx {
        hw,
        seed: opts.seed,
        functional: opts.functional,
        tables: &tables,
    };
    let mut bindings = bind.clone();

    let mut store: Store = BTreeMap::new();
    for t in &dag.inputs {
        let rows = t
            .rows
            .resolve(&|s: &str| bindings.get(s))
            .ok_or_else(|| RuntimeError::MissingBinding(t.rows.sym.clone().unwrap_or_default()))?;
        let buf = match inputs.get(&t.buf) {
            Some(x) => {
                if x.rows != rows || x.cols != t.cols {
                    return Err(RuntimeError::BindingViolation {
                        block: t.buf.clone(),
                        detail: format!("input is {}x{}, bound to {rows}x{}", x.rows, x.cols, t.cols),
                    });
                }
                Buffer::tensor(x.clone(), None)
            }
            None if !opts.functional => Buffer::shape(rows, t.cols, None),
            None => return Err(RuntimeError::MissingInput(t.buf.clone())),
        };
        store.insert(t.buf.clone(), buf);
    }

    let succ = dag.successors();
    let mut pending: Vec<usize> = dag.blocks.iter().map(|b| b.deps.len()).collect();
    let mut inst: Vec<Option<InstructionBlock>> = vec![None; n];
    let mut candidates = BTreeSet::new();
    for b in &dag.blocks {
        if b.deps.is_empty() {
            bind_kept(&mut bindings, b);
            inst[b.block_id] = Some(instantiate_template(b, &bindings, hw)?);
            candidates.insert(b.block_id);
        }
    }
    let eligible: Vec<Vec<usize>> = dag
        .blocks
        .iter()
        .map(|b| match placement.slots[b.block_id] {
            Slot::Pinned { row, col } => vec![row * hw.grid_cols + col],
            Slot::Floating => (0..rpus).filter(|&r| capable(grid.capabilities[r], b.requires)).collect(),
        })
        .collect();

    let mut free = vec![0u64; rpus];
    let mut last_mode: Vec<Option<MseMode>> = vec![None; rpus];
    let mut records: Vec<Option<BlockRecord>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    let mut transfers = Vec::new();
    let mut pruning = Vec::new();

    while !candidates.is_empty() {
        // earliest feasible start over every (block, RPU) pair
        let mut best: Option<((u64, bool, u64, usize), usize, Vec<(usize, u64)>)> = None;
        for &b in &candidates {
            let blk = inst[b].as_ref().expect("candidates are instantiated");
            let ready_on: Vec<(usize, u64)> = eligible[b]
                .iter()
                .map(|&r| {
                    let ready = dag.blocks[b]
                        .deps
                        .iter()
                        .map(|&d| {
                            let p = records[d].as_ref().expect("predecessors dispatched");
                            p.end + transfer_cycles(&grid.link, p.out_bytes, p.rpu, r)
                        })
                        .max()
                        .unwrap_or(0);
                    (r, ready)
                })
                .collect();
            let starts: Vec<(usize, u64)> = ready_on.iter().map(|&(r, t)| (r, t.max(free[r]))).collect();
            let start = starts.iter().map(|s| s.1).min().expect("eligible RPUs exist");
            let hint = blk.placement_hint.map(|(row, col)| row * hw.grid_cols + col);
            let rpu = match hint {
                Some(h) if starts.contains(&(h, start)) => h,
                _ => starts.iter().find(|s| s.1 == start).expect("minimum attained").0,
            };
            let pinned = rpus > 1 && matches!(placement.slots[b], Slot::Pinned { .. });
            let prio = match priority {
                Priority::Lpt => u64::MAX - blk.est_cycles,
                Priority::Fifo => 0,
            };
            let key = (start, !pinned, prio, b);
            if best.as_ref().is_none_or(|(k, _, _)| key < *k) {
                best = Some((key, rpu, ready_on));
            }
        }
        let ((start, not_pinned, _, b), rpu, ready_on) = best.expect("non-empty candidate set");
        candidates.remove(&b);
        let blk = inst[b].take().expect("instantiated");
        let kern = &blk.kernel;

        let rows = observed_rows(kern, &store, opts.seed)?;
        let mut mode = blk.mode;
        if let (Some(est), Some(counts)) = (&kern.sparsity, &rows) {
            let observed = bindings.profiles.get(&blk.name).cloned().unwrap_or_else(|| {
                SparsityProfile::from_row_counts(counts, est.row_len, SparsitySource::RuntimeObserved)
            });
            if drifted(est, &observed, hw.policy.drift_trigger) {
                mode = runtime_mode_flip(mode, &observed, kern, &hw.array, &hw.policy);
            }
        }
        let flipped = mode != blk.mode;
        let mut cycles = kernel_cycles(kern, &mode, &hw.array, &hw.topk, rows.as_deref());
        let mut switch = 0;
        if kern.kind.uses_mse() {
            if let Some(prev) = last_mode[rpu] {
                switch = mode_switch_cost(&prev, &mode, pipeline_depth(&prev, &hw.array), hw.register_write_cycles);
            }
            last_mode[rpu] = Some(mode);
        }
        cycles.add_mode_switch(switch);

        let outcome = exec_block(kern, &mode, blk.tiling, &store, &ctx)?;
        if let (Some(kept), Some(t)) = (&outcome.kept, &dag.blocks[b].kernel.topk) {
            if let Some(sym) = &t.keep.sym {
                if let Some(v) = bindings.extents.get(sym) {
                    if *v != kept.len() {
                        return Err(RuntimeError::BindingViolation {
                            block: blk.name.clone(),
                            detail: format!("`{sym}` bound to {v} but the top-k kept {}", kept.len()),
                        });
                    }
                }
                bindings.set(sym, kept.len());
            }
            pruning.push(PruneStat {
                block: blk.name.clone(),
                stream: t.stream.resolve(&|s: &str| bindings.get(s)).unwrap_or(t.stream.est),
                kept: kept.len(),
            });
        }
        let end = start + cycles.total;
        for &d in &dag.blocks[b].deps {
            let p = records[d].as_ref().expect("dispatched");
            if p.rpu != rpu {
                let t = transfer_cycles(&grid.link, p.out_bytes, p.rpu, rpu);
                transfers.push(TransferRecord {
                    from_block: d,
                    to_block: b,
                    src: p.rpu,
                    dst: rpu,
                    bytes: p.out_bytes,
                    start: p.end,
                    end: p.end + t,
                });
            }
        }
        log::debug!("dispatch {} on RPU {rpu} at {start}..{end} ({mode})", blk.name);
        records[b] = Some(BlockRecord {
            block_id: b,
            name: blk.name.clone(),
            rpu,
            start,
            end,
            mode: mode.to_string(),
            flipped,
            pinned: !not_pinned,
            switch_cycles: switch,
            cycles,
            out_bytes: outcome.out.bytes(),
            ready_on,
        });
        free[rpu] = end;
        order.push(b);
        store.insert(blk.writes.clone(), outcome.out);
        for &s in &succ[b] {
            pending[s] -= 1;
            if pending[s] == 0 {
                bind_kept(&mut bindings, &dag.blocks[s]);
                inst[s] = Some(instantiate_template(&dag.blocks[s], &bindings, hw)?);
                candidates.insert(s);
            }
        }
    }
    if order.len() != n {
        return Err(RuntimeError::Deadlock(n - order.len()));
    }

    let records: Vec<BlockRecord> = records.into_iter().map(|r| r.expect("all dispatched")).collect();
    let makespan = records.iter().map(|r| r.end).max().unwrap_or(0);
    let mut busy = vec![0u64; rpus];
    for r in &records {
        busy[r.rpu] += r.end - r.start;
    }
    let utilization = busy
        .iter()
        .map(|&b| if makespan == 0 { 0.0 } else { b as f64 / makespan as f64 })
        .collect();
    let mut outputs = BTreeMap::new();
    if opts.functional {
        for t in &dag.outputs {
            let buf = store.get(&t.buf).ok_or_else(|| RuntimeError::MissingBuffer(t.buf.clone()))?;
            if let Some(d) = &buf.data {
                outputs.insert(t.buf.clone(), d.clone());
            }
        }
    }
    let trace = ScheduleTrace {
        rpus,
        link: grid.link,
        mode_flips: records.iter().filter(|r| r.flipped).count(),
        mode_switch_cycles: records.iter().map(|r| r.switch_cycles).sum(),
        records,
        dispatch_order: order,
        transfers,
        makespan,
        busy,
        utilization,
        pruning,
    };
    debug_assert!(trace.validate(dag).is_ok());
    Ok(RunResult { outputs, trace })
}
