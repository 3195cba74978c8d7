//! Hardware configuration: RPU grid, PE array, link model, policy thresholds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CompileError;

/// Shape of the PE array inside one mode-switchable engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    /// PE rows (R).
    pub rows: usize,
    /// PE columns, the array width (C_S).
    pub cols: usize,
    /// Elements held by each PE register file.
    pub rf_depth: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            rows: 32,
            cols: 32,
            rf_depth: 32,
        }
    }
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize) -> Self {
        ArrayConfig {
            rows,
            cols,
            rf_depth: rows.max(1),
        }
    }

    /// Wavefront skew across the array: `R + C_S - 1`.
    pub fn fill(&self) -> u64 {
        (self.rows + self.cols - 1) as u64
    }

    pub fn pes(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

/// Mode-selection thresholds and other tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Weight-stationary when the weight-reuse ratio reaches this value.
    pub theta_ws: f64,
    /// Row SIMD needs at least `alpha * C_S` active operands per row.
    pub alpha: f64,
    /// Row SIMD tolerates at most this coefficient of variation across rows.
    pub sigma_max: f64,
    /// Relative gap between WS/OS estimates treated as a tie.
    pub ws_os_tie_tolerance: f64,
    /// Relative deviation of observed activity that triggers a mode re-check.
    pub drift_trigger: f64,
    /// Attention heads become separate kernels up to this count, a loop bound beyond it.
    pub head_fanout_cap: usize,
    /// Degree skew assumed for graphs without a declared degree list.
    pub default_graph_skew: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            theta_ws: 2.0,
            alpha: 0.5,
            sigma_max: 0.5,
            ws_os_tie_tolerance: 0.10,
            drift_trigger: 0.25,
            head_fanout_cap: 4,
            default_graph_skew: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopkArch {
    Bitonic,
    DualLayer,
}

/// What to do when a pruning request keeps more tokens than the unit's Max-k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopkOverflow {
    /// Repeated passes over the stream, `max_k` winners per pass.
    Chunked,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopkConfig {
    pub arch: TopkArch,
    pub max_k: usize,
    pub overflow: TopkOverflow,
}

impl Default for TopkConfig {
    fn default() -> Self {
        TopkConfig {
            arch: TopkArch::Bitonic,
            max_k: 256,
            overflow: TopkOverflow::Chunked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub bytes_per_cycle: f64,
    pub hop_latency: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            bytes_per_cycle: 256.0,
            hop_latency: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub topk: bool,
    pub nonlinear: bool,
}

impl Default for Capability {
    fn default() -> Self {
        Capability {
            topk: true,
            nonlinear: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Priority {
    /// Longest estimated processing time first.
    Lpt,
    /// Lowest block id first.
    Fifo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub name: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub array: ArrayConfig,
    pub clock_mhz: f64,
    #[serde(default)]
    pub link: LinkConfig,
    /// Per-RPU local buffer for tile working sets.
    pub local_buffer_bytes: u64,
    /// Inter-RPU buffer per neighbor link; larger intermediates force co-location.
    pub inter_rpu_buffer_bytes: u64,
    /// Row-major per-RPU capabilities; empty means every RPU has every unit.
    #[serde(default)]
    pub capabilities: Vec<Capability>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub topk: TopkConfig,
    /// Control registers rewritten on a mode change.
    #[serde(default = "default_register_cycles")]
    pub register_write_cycles: u64,
    #[serde(default = "default_priority")]
    pub priority: Priority,
}

fn default_register_cycles() -> u64 {
    8
}

fn default_priority() -> Priority {
    Priority::Lpt
}

impl HardwareConfig {
    /// Alveo U50 build: 2x2 RPUs, 32x32 PEs, 300 MHz, bitonic top-k.
    pub fn u50() -> Self {
        HardwareConfig {
            name: "u50".into(),
            grid_rows: 2,
            grid_cols: 2,
            array: ArrayConfig::default(),
            clock_mhz: 300.0,
            // 316 GB/s at 300 MHz split over four RPUs
            link: LinkConfig {
                bytes_per_cycle: 263.0,
                hop_latency: 16,
            },
            local_buffer_bytes: 1 << 20,
            inter_rpu_buffer_bytes: 256 << 10,
            capabilities: Vec::new(),
            policy: PolicyConfig::default(),
            topk: TopkConfig::default(),
            register_write_cycles: 8,
            priority: Priority::Lpt,
        }
    }

    /// ZCU104 build: one RPU, 32x32 PEs, 200 MHz, dual-layer top-k.
    pub fn zcu104() -> Self {
        HardwareConfig {
            name: "zcu104".into(),
            grid_rows: 1,
            grid_cols: 1,
            clock_mhz: 200.0,
            // 19.2 GB/s at 200 MHz
            link: LinkConfig {
                bytes_per_cycle: 96.0,
                hop_latency: 16,
            },
            topk: TopkConfig {
                arch: TopkArch::DualLayer,
                ..TopkConfig::default()
            },
            ..Self::u50()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "u50" => Some(Self::u50()),
            "zcu104" => Some(Self::zcu104()),
            _ => None,
        }
    }

    /// A named preset, or a JSON file path.
    pub fn load(spec: &str) -> Result<Self, CompileError> {
        if let Some(hw) = Self::preset(spec) {
            return Ok(hw);
        }
        let text = std::fs::read_to_string(Path::new(spec))
            .map_err(|e| CompileError::Hardware(format!("cannot read `{spec}`: {e}")))?;
        let hw: HardwareConfig = serde_json::from_str(&text)
            .map_err(|e| CompileError::Hardware(format!("`{spec}`: {e}")))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.grid_rows = rows;
        self.grid_cols = cols;
        self.capabilities.clear();
        self
    }

    pub fn rpu_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn rpu_coord(&self, index: usize) -> (usize, usize) {
        (index / self.grid_cols, index % self.grid_cols)
    }

    pub fn capability(&self, rpu: usize) -> Capability {
        self.capabilities.get(rpu).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        let bad = |m: &str| Err(CompileError::Hardware(m.to_string()));
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("grid extents must be positive");
        }
        if self.array.rows == 0 || self.array.cols == 0 || self.array.rf_depth == 0 {
            return bad("array extents must be positive");
        }
        if !self.array.cols.is_power_of_two() {
            return bad("array width must be a power of two");
        }
        if self.clock_mhz <= 0.0 || self.link.bytes_per_cycle <= 0.0 {
            return bad("clock and link bandwidth must be positive");
        }
        if self.local_buffer_bytes == 0 || self.inter_rpu_buffer_bytes == 0 {
            return bad("buffer sizes must be positive");
        }
        if !self.capabilities.is_empty() && self.capabilities.len() != self.rpu_count() {
            return bad("capability map must list every RPU");
        }
        if self.topk.max_k == 0 {
            return bad("top-k Max-k must be positive");
        }
        let p = &self.policy;
        if p.theta_ws <= 0.0 || p.alpha <= 0.0 || p.sigma_max < 0.0 || p.head_fanout_cap == 0 {
            return bad("policy thresholds must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for hw in [HardwareConfig::u50(), HardwareConfig::zcu104()] {
            hw.validate().unwrap();
            assert_eq!(hw.array.rows, 32);
            assert_eq!(hw.array.cols, 32);
            assert_eq!(hw.topk.max_k, 256);
        }
        assert_eq!(HardwareConfig::u50().rpu_count(), 4);
        assert_eq!(HardwareConfig::zcu104().rpu_count(), 1);
        assert_eq!(HardwareConfig::zcu104().clock_mhz, 200.0);
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let hw = HardwareConfig::u50();
        let text = serde_json::to_string(&hw).unwrap();
        let back: HardwareConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, hw);
        let minimal = r#"{"name":"t","grid_rows":1,"grid_cols":2,"array":{"rows":8,"cols":8,"rf_depth":8},
            "clock_mhz":100,"local_buffer_bytes":4096,"inter_rpu_buffer_bytes":1024}"#;
        let hw: HardwareConfig = serde_json::from_str(minimal).unwrap();
        hw.validate().unwrap();
        assert_eq!(hw.policy, PolicyConfig::default());
    }

    #[test]
    fn rejects_bad_capability_map() {
        let mut hw = HardwareConfig::u50();
        hw.capabilities = vec![Capability::default()];
        assert!(hw.validate().is_err());
    }
}
