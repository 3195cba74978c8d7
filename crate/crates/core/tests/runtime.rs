use std::collections::BTreeMap;

use trine::kernel_ir::{SparsityProfile, SparsitySource};
use trine::model_spec::{LayerKind, LayerSpec, ModelGraph, PruneRequest};
use trine::program::{compile, CompiledProgram};
use trine::runtime::{random_inputs, run, run_sequential, RunOptions, RuntimeBindings};
use trine::{models, HardwareConfig, RuntimeError};

fn graph(layers: Vec<LayerSpec>, edges: &[(&str, &str)], inputs: &[&str], outputs: &[&str]) -> ModelGraph {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
    ModelGraph {
        name: "t".into(),
        layers,
        edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        inputs: s(inputs),
        outputs: s(outputs),
    }
}

fn linear(id: &str) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Linear).dim("T", 64).dim("D", 64).dim("D_out", 64)
}

fn free_link(mut hw: HardwareConfig) -> HardwareConfig {
    hw.link.bytes_per_cycle = f64::INFINITY;
    hw.link.hop_latency = 0;
    hw
}

fn go(prog: &CompiledProgram, bind: &RuntimeBindings) -> trine::runtime::RunResult {
    let inputs = random_inputs(&prog.dag, bind, 1).unwrap();
    run(prog, &inputs, bind, &RunOptions { seed: 1, ..RunOptions::default() }).unwrap()
}

#[test]
fn independent_blocks_overlap_on_two_rpus() {
    let g = graph(vec![linear("a"), linear("b")], &[], &["a", "b"], &["a", "b"]);
    let prog = compile(&g, &free_link(HardwareConfig::u50().with_grid(1, 2))).unwrap();
    let r = go(&prog, &RuntimeBindings::new());
    let ra = &r.trace.records[0];
    let rb = &r.trace.records[1];
    assert_eq!(ra.cycles.total, rb.cycles.total);
    assert_ne!(ra.rpu, rb.rpu);
    assert_eq!((ra.start, rb.start), (0, 0));
    assert_eq!(r.trace.makespan, ra.cycles.total);
}

#[test]
fn single_rpu_makespan_is_sum_of_costs() {
    let g = graph(vec![linear("a"), linear("b"), linear("c")], &[("a", "c")], &["a", "b"], &["b", "c"]);
    let prog = compile(&g, &HardwareConfig::zcu104()).unwrap();
    let r = go(&prog, &RuntimeBindings::new());
    let sum: u64 = r.trace.records.iter().map(|x| x.cycles.total).sum();
    assert_eq!(r.trace.makespan, sum);
    r.trace.validate(&prog.dag).unwrap();
}

#[test]
fn singleton_dag_matches_sequential() {
    let g = graph(vec![linear("a")], &[], &["a"], &["a"]);
    let prog = compile(&g, &HardwareConfig::u50()).unwrap();
    let bind = RuntimeBindings::new();
    let inputs = random_inputs(&prog.dag, &bind, 3).unwrap();
    let opts = RunOptions::default();
    let a = run(&prog, &inputs, &bind, &opts).unwrap();
    let b = run_sequential(&prog, &inputs, &bind, &opts).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.trace.makespan, b.trace.makespan);
    assert_eq!(a.trace.records[0].cycles, b.trace.records[0].cycles);
}

#[test]
fn timing_only_trace_matches_functional() {
    let prog = compile(&models::load("tinyclip_b").unwrap().unwrap(), &HardwareConfig::u50()).unwrap();
    let mut bind = RuntimeBindings::new();
    bind.fill_estimates(&prog.dag);
    let inputs = random_inputs(&prog.dag, &bind, 0).unwrap();
    let f = run(&prog, &inputs, &bind, &RunOptions::default()).unwrap();
    let t = run(&prog, &BTreeMap::new(), &bind, &RunOptions { functional: false, ..RunOptions::default() }).unwrap();
    assert_eq!(f.trace.to_csv(), t.trace.to_csv());
    assert!(t.outputs.is_empty() || t.outputs.values().all(|o| o.data.is_empty()));
}

#[test]
fn pruned_attention_binds_kept_tokens() {
    let g = graph(
        vec![
            LayerSpec::new("x", LayerKind::Linear).dim("T", 197).dim("D", 64).dim("D_out", 64),
            LayerSpec::new("attn", LayerKind::Attention)
                .dim("D", 64)
                .dim("H", 1)
                .with_prune(PruneRequest::Rate { rate: 0.3 }),
        ],
        &[("x", "attn")],
        &["x"],
        &["attn"],
    );
    let prog = compile(&g, &HardwareConfig::u50()).unwrap();
    let r = go(&prog, &RuntimeBindings::new());
    assert_eq!(r.trace.pruning.len(), 1);
    assert_eq!(r.trace.pruning[0].kept, 138);
    let scores = prog.dag.blocks.iter().find(|b| b.name.contains("scores")).unwrap();
    let rec = r.trace.records.iter().find(|x| x.block_id == scores.block_id).unwrap();
    assert!(rec.cycles.total > 0);
    let out = r.outputs.values().next().unwrap();
    assert_eq!(out.rows, 138);
}

#[test]
fn explicit_kept_binding_overrides_rate() {
    let g = graph(
        vec![
            LayerSpec::new("x", LayerKind::Linear).dim("T", 64).dim("D", 32).dim("D_out", 32),
            LayerSpec::new("attn", LayerKind::Attention)
                .dim("D", 32)
                .dim("H", 1)
                .with_prune(PruneRequest::Rate { rate: 0.5 }),
        ],
        &[("x", "attn")],
        &["x"],
        &["attn"],
    );
    let prog = compile(&g, &HardwareConfig::u50()).unwrap();
    let sym = prog.dag.symbols.keys().next().unwrap().clone();
    let r = go(&prog, &RuntimeBindings::new().with(&sym, 10));
    assert_eq!(r.trace.pruning[0].kept, 10);
    assert_eq!(r.outputs.values().next().unwrap().rows, 10);

    let bind = RuntimeBindings::new().with(&sym, 65);
    let inputs = random_inputs(&prog.dag, &RuntimeBindings::new(), 0).unwrap();
    assert!(run(&prog, &inputs, &bind, &RunOptions::default()).is_err());
}

#[test]
fn missing_binding_reported() {
    let g = graph(
        vec![LayerSpec::new("a", LayerKind::Linear).dim("T", 16).dim("D", 16).dim("D_out", 16).with_fuzzy("T")],
        &[],
        &["a"],
        &["a"],
    );
    let prog = compile(&g, &HardwareConfig::u50()).unwrap();
    let err = run(&prog, &BTreeMap::new(), &RuntimeBindings::new(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, RuntimeError::MissingBinding(ref s) if s == "a.T"), "{err:?}");
}

#[test]
fn drifted_profile_flips_mode_without_changing_results() {
    let prog = compile(&models::load("missiongnn_k").unwrap().unwrap(), &HardwareConfig::u50()).unwrap();
    let mut bind = RuntimeBindings::new();
    bind.fill_estimates(&prog.dag);
    let base = go(&prog, &bind);
    assert_eq!(base.trace.mode_flips, 0);

    let dense_rows = SparsityProfile {
        p: 0.05,
        per_row_activity: 60.0,
        skew: 0.05,
        source: SparsitySource::RuntimeObserved,
        row_len: 64,
    };
    bind.profiles.insert("kg.agg0.agg".into(), dense_rows);
    let flipped = go(&prog, &bind);
    assert_eq!(flipped.trace.mode_flips, 1);
    let rec = flipped.trace.records.iter().find(|r| r.name == "kg.agg0.agg").unwrap();
    assert!(rec.flipped);
    assert!(rec.mode.starts_with("SIMD_ROW"), "{}", rec.mode);
    assert_eq!(base.outputs, flipped.outputs);
    flipped.trace.validate(&prog.dag).unwrap();
}
