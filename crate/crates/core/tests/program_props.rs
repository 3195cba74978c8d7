use proptest::prelude::*;

use trine::model_spec::{LayerKind, LayerSpec, ModelGraph, PruneRequest};
use trine::program::{compile, descendants, tile_ranges, CompiledProgram};
use trine::HardwareConfig;

fn model(t: usize, d: usize, d_out: usize, heads: usize, prune: bool) -> ModelGraph {
    let mut attn = LayerSpec::new("attn", LayerKind::Attention).dim("D", d).dim("H", heads);
    if prune {
        attn = attn.with_prune(PruneRequest::Rate { rate: 0.3 });
    }
    ModelGraph {
        name: "p".into(),
        layers: vec![
            LayerSpec::new("x", LayerKind::Linear).dim("T", t).dim("D", d).dim("D_out", d),
            attn,
            LayerSpec::new("y", LayerKind::Linear).dim("D", d).dim("D_out", d_out),
        ],
        edges: vec![("x".into(), "attn".into()), ("attn".into(), "y".into())],
        inputs: vec!["x".into()],
        outputs: vec!["y".into()],
    }
}

fn params() -> impl Strategy<Value = (usize, usize, usize, usize, bool)> {
    (1usize..=3, 1usize..=300, 1usize..=700, 1usize..=300, any::<bool>())
        .prop_map(|(h, t, dh, d_out, p)| (t, h * dh.div_ceil(h).max(1), d_out, h, p))
        .prop_filter("head width divides model width", |(_, d, _, h, _)| d % h == 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiles_conserve_macs((t, d, d_out, h, p) in params()) {
        let prog = compile(&model(t, d, d_out, h, p), &HardwareConfig::u50()).unwrap();
        for b in &prog.dag.blocks {
            let (n, m, k) = b.kernel.shape.est();
            let rn = tile_ranges(n, b.tiling.t_n);
            let rm = tile_ranges(m, b.tiling.t_m);
            let rk = tile_ranges(k, b.tiling.t_k);
            prop_assert_eq!((rn.len(), rm.len(), rk.len()), (b.trips.n, b.trips.m, b.trips.k));
            let span = |r: &[(usize, usize)]| r.iter().map(|(a, b)| b - a).sum::<usize>();
            prop_assert_eq!(span(&rn) * span(&rm) * span(&rk), n * m * k, "{}", b.name);
        }
        let head_macs: usize = prog
            .dag
            .blocks
            .iter()
            .filter(|b| b.name.contains(".scores."))
            .map(|b| { let (n, m, k) = b.kernel.shape.est(); n * m * k })
            .sum();
        let kept = if p { trine::model_spec::kept_for_rate(0.3, t) } else { t };
        prop_assert_eq!(head_macs, kept * kept * d);
    }

    #[test]
    fn projections_are_independent((t, d, d_out, h, p) in params()) {
        let prog = compile(&model(t, d, d_out, h, p), &HardwareConfig::u50()).unwrap();
        let id = |s: &str| prog.dag.blocks.iter().find(|b| b.name == s).unwrap().block_id;
        let proj = [id("attn.q_proj"), id("attn.k_proj"), id("attn.v_proj")];
        for &a in &proj {
            let below = descendants(&prog.dag, a);
            for &b in &proj {
                prop_assert!(a == b || !below.contains(&b));
            }
        }
    }

    #[test]
    fn json_round_trip((t, d, d_out, h, p) in params(), grid in 0usize..3) {
        let hw = [HardwareConfig::u50(), HardwareConfig::zcu104(), HardwareConfig::u50().with_grid(1, 3)][grid].clone();
        let prog = compile(&model(t, d, d_out, h, p), &hw).unwrap();
        let text = prog.to_json();
        let back = CompiledProgram::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
    }
}

#[test]
fn rejects_foreign_format() {
    let prog = compile(&model(8, 8, 8, 1, false), &HardwareConfig::u50()).unwrap();
    let text = prog.to_json().replace("trine-program/1", "other/9");
    assert!(CompiledProgram::from_json(&text).is_err());
    assert!(CompiledProgram::from_json("{").is_err());
}
