//! Run-time values for symbolic extents, and template instantiation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::error::{CompileError, RuntimeError};
use crate::kernel_ir::{estimate_sparsity, Extent, Kernel, SparsityProfile, SymbolDef};
use crate::mode_policy::decide;
use crate::program::{build_block_with_mode, InstructionBlock, ProgramDag};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBindings {
    /// Token counts and kept counts by symbol name.
    #[serde(default)]
    pub extents: BTreeMap<String, usize>,
    /// Observed sparsity profiles by block name; they drive mode flips.
    #[serde(default)]
    pub profiles: BTreeMap<String, SparsityProfile>,
}

impl RuntimeBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, sym: &str, value: usize) -> Self {
        self.extents.insert(sym.to_string(), value);
        self
    }

    pub fn set(&mut self, sym: &str, value: usize) {
        self.extents.insert(sym.to_string(), value);
    }

    /// Value of `sym`; understands the scaled form `"<factor>*<name>"`.
    pub fn get(&self, sym: &str) -> Option<usize> {
        if let Some(v) = self.extents.get(sym) {
            return Some(*v);
        }
        let (factor, name) = sym.split_once('*')?;
        Some(factor.parse::<usize>().ok()? * self.get(name)?)
    }

    /// Input symbols of `dag` with no binding.
    pub fn missing_inputs(&self, dag: &ProgramDag) -> Vec<String> {
        dag.symbols
            .iter()
            .filter(|(name, def)| matches!(def, SymbolDef::Input { .. }) && self.get(name).is_none())
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Binds every unbound input symbol to its compile-time estimate.
    pub fn fill_estimates(&mut self, dag: &ProgramDag) {
        for name in self.missing_inputs(dag) {
            let est = dag.symbols[&name].estimate();
            self.extents.insert(name, est);
        }
    }
}

fn bind_extent(e: &mut Extent, bind: &RuntimeBindings) {
    *e = e.bound(&|s: &str| bind.get(s));
}

/// Kernel with every symbolic extent replaced by its binding.
pub fn bind_kernel(kern: &Kernel, bind: &RuntimeBindings, default_graph_skew: f64) -> Result<Kernel, RuntimeError> {
    for s in kern.symbols() {
        if bind.get(&s).is_none() {
            return Err(RuntimeError::MissingBinding(s));
        }
    }
    let mut k = kern.clone();
    bind_extent(&mut k.shape.n, bind);
    bind_extent(&mut k.shape.m, bind);
    bind_extent(&mut k.shape.k, bind);
    bind_extent(&mut k.out_rows, bind);
    if let Some(t) = &mut k.topk {
        bind_extent(&mut t.keep, bind);
        bind_extent(&mut t.stream, bind);
    }
    if let Some(s) = &mut k.stream_len {
        bind_extent(s, bind);
    }
    if k.kind.is_sparse() {
        k.sparsity = Some(
            estimate_sparsity(&k, k.prune, default_graph_skew)
                .map_err(|e| RuntimeError::Compile(CompileError::Lower(e)))?,
        );
    }
    Ok(k)
}

/// Completes a template block with bound extents. Dense kernels go back
/// through the mode policy; sparse kernels keep their compiled mode and only
/// change it through drift flips.
pub fn instantiate_template(
    block: &InstructionBlock,
    bind: &RuntimeBindings,
    hw: &HardwareConfig,
) -> Result<InstructionBlock, RuntimeError> {
    if !block.template {
        return Ok(block.clone());
    }
    let kern = bind_kernel(&block.kernel, bind, hw.policy.default_graph_skew)?;
    let (mode, reason) = if kern.kind.is_sparse() {
        (block.mode, block.mode_reason.clone())
    } else {
        let d = decide(&kern, &hw.array, &hw.policy);
        (d.mode, d.reason)
    };
    let mut out = build_block_with_mode(block.block_id, kern, mode, reason, hw).map_err(|e| match e {
        CompileError::NoLegalTiling { block, buffer } => RuntimeError::BindingViolation {
            block,
            detail: format!("no tiling fits the {buffer} byte local buffer"),
        },
        other => RuntimeError::Compile(other),
    })?;
    out.deps = block.deps.clone();
    out.placement_hint = block.placement_hint;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{LayerKind, LayerSpec, ModelGraph};
    use crate::program::compile;

    fn text(t: usize, fuzzy: bool) -> ModelGraph {
        let mut emb = LayerSpec::new("emb", LayerKind::Embed).dim("T", t).dim("D", 64).dim("F", 64);
        if fuzzy {
            emb = emb.with_fuzzy("T");
        }
        ModelGraph {
            name: "txt".into(),
            layers: vec![emb, LayerSpec::new("attn", LayerKind::Attention).dim("D", 64).dim("H", 2)],
            edges: vec![("emb".into(), "attn".into())],
            inputs: vec!["emb".into()],
            outputs: vec!["attn".into()],
        }
    }

    #[test]
    fn scaled_symbols() {
        let b = RuntimeBindings::new().with("a.kept", 10);
        assert_eq!(b.get("6*a.kept"), Some(60));
        assert_eq!(b.get("x*a.kept"), None);
        assert_eq!(b.get("b"), None);
    }

    #[test]
    fn template_matches_static_compile() {
        let hw = HardwareConfig::u50();
        let fuzzy = compile(&text(60, true), &hw).unwrap();
        let fixed = compile(&text(77, false), &hw).unwrap();
        let bind = RuntimeBindings::new().with("emb.T", 77);
        for (t, s) in fuzzy.dag.blocks.iter().zip(&fixed.dag.blocks) {
            assert!(t.template);
            let b = instantiate_template(t, &bind, &hw).unwrap();
            assert!(!b.template && b.unbound.is_empty());
            assert_eq!(b.kernel.shape, s.kernel.shape);
            assert_eq!(b.tiling, s.tiling);
            assert_eq!(b.trips, s.trips);
            assert_eq!(b.mode, s.mode);
            assert_eq!(b.est_cycles, s.est_cycles);
        }
    }

    #[test]
    fn fixed_block_unchanged_and_missing_binding() {
        let hw = HardwareConfig::u50();
        let fixed = compile(&text(8, false), &hw).unwrap();
        let b = &fixed.dag.blocks[0];
        assert_eq!(&instantiate_template(b, &RuntimeBindings::new(), &hw).unwrap(), b);
        let fuzzy = compile(&text(8, true), &hw).unwrap();
        assert_eq!(
            instantiate_template(&fuzzy.dag.blocks[0], &RuntimeBindings::new(), &hw),
            Err(RuntimeError::MissingBinding("emb.T".into()))
        );
    }
}
