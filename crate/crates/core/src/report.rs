//! Run summaries, sweep tables and trace re-derivation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::runtime::{PruneStat, RunResult, ScheduleTrace};
use crate::QTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub block_id: usize,
    pub name: String,
    pub mode: String,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    /// FNV-1a over the int8 payload.
    pub checksum: String,
}

impl OutputSummary {
    pub fn of(t: &QTensor) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in &t.data {
            h ^= b as u8 as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        OutputSummary {
            rows: t.rows,
            cols: t.cols,
            scale: t.scale,
            checksum: format!("{h:016x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub hw: String,
    pub scheduler: String,
    pub prune: Option<f64>,
    pub seed: u64,
    pub functional: bool,
    pub clock_mhz: f64,
    pub makespan_cycles: u64,
    pub latency_ms: f64,
    pub total_block_cycles: u64,
    pub rpu_utilization: Vec<f64>,
    pub mode_flips: usize,
    pub mode_switch_cycles: u64,
    pub pruning: Vec<PruneStat>,
    pub modes: Vec<ModeRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequential_cycles: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_vs_sequential: Option<f64>,
    pub outputs: BTreeMap<String, OutputSummary>,
}

pub fn latency_ms(cycles: u64, clock_mhz: f64) -> f64 {
    cycles as f64 / (clock_mhz * 1e3)
}

pub struct ReportMeta<'a> {
    pub model: &'a str,
    pub hw: &'a str,
    pub scheduler: &'a str,
    pub prune: Option<f64>,
    pub seed: u64,
    pub functional: bool,
    pub clock_mhz: f64,
}

impl Report {
    pub fn new(meta: &ReportMeta<'_>, result: &RunResult, sequential: Option<&ScheduleTrace>) -> Self {
        let t = &result.trace;
        Report {
            model: meta.model.to_string(),
            hw: meta.hw.to_string(),
            scheduler: meta.scheduler.to_string(),
            prune: meta.prune,
            seed: meta.seed,
            functional: meta.functional,
            clock_mhz: meta.clock_mhz,
            makespan_cycles: t.makespan,
            latency_ms: latency_ms(t.makespan, meta.clock_mhz),
            total_block_cycles: t.total_work(),
            rpu_utilization: t.utilization.clone(),
            mode_flips: t.mode_flips,
            mode_switch_cycles: t.mode_switch_cycles,
            pruning: t.pruning.clone(),
            modes: t
                .records
                .iter()
                .map(|r| ModeRow {
                    block_id: r.block_id,
                    name: r.name.clone(),
                    mode: r.mode.clone(),
                    flipped: r.flipped,
                })
                .collect(),
            sequential_cycles: sequential.map(|s| s.makespan),
            speedup_vs_sequential: sequential.map(|s| s.makespan as f64 / t.makespan.max(1) as f64),
            outputs: result.outputs.iter().map(|(k, v)| (k.clone(), OutputSummary::of(v))).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

/// Figures recomputed from a trace CSV alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub blocks: usize,
    pub makespan: u64,
    pub busy: Vec<u64>,
    pub utilization: Vec<f64>,
    pub mode_flips: usize,
    pub total_cycles: u64,
}

pub fn summarize_csv(csv: &str, rpus: usize) -> Result<TraceSummary, String> {
    let mut lines = csv.lines();
    if lines.next() != Some("block_id,rpu,start,end,mode,flipped") {
        return Err("unexpected trace header".into());
    }
    let mut s = TraceSummary {
        blocks: 0,
        makespan: 0,
        busy: vec![0; rpus],
        utilization: Vec::new(),
        mode_flips: 0,
        total_cycles: 0,
    };
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(format!("line {}: expected 6 fields", i + 2));
        }
        let num = |x: &str| x.parse::<u64>().map_err(|e| format!("line {}: {e}", i + 2));
        let rpu = num(f[1])? as usize;
        let (start, end) = (num(f[2])?, num(f[3])?);
        if rpu >= rpus {
            return Err(format!("line {}: RPU {rpu} outside the grid", i + 2));
        }
        s.blocks += 1;
        s.makespan = s.makespan.max(end);
        s.busy[rpu] += end - start;
        s.total_cycles += end - start;
        s.mode_flips += usize::from(f[5] == "true");
    }
    s.utilization = s
        .busy
        .iter()
        .map(|&b| if s.makespan == 0 { 0.0 } else { b as f64 / s.makespan as f64 })
        .collect();
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prune: f64,
    pub scheduler: String,
    pub makespan: u64,
    pub latency_ms: f64,
    pub speedup: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("config,prune,scheduler,makespan,latency_ms,speedup\n");
    for r in rows {
        s.push_str(&format!(
            "p={}/{},{},{},{},{:.6},{:.6}\n",
            r.prune, r.scheduler, r.prune, r.scheduler, r.makespan, r.latency_ms, r.speedup
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_conversion() {
        assert_eq!(latency_ms(300_000, 300.0), 1.0);
        assert_eq!(latency_ms(0, 200.0), 0.0);
    }

    #[test]
    fn csv_summary() {
        let csv = "block_id,rpu,start,end,mode,flipped\n0,0,0,10,OS,false\n1,1,0,5,SIMD_ROW,true\n2,0,10,20,WS,false\n";
        let s = summarize_csv(csv, 2).unwrap();
        assert_eq!(s.makespan, 20);
        assert_eq!(s.busy, vec![20, 5]);
        assert_eq!(s.utilization, vec![1.0, 0.25]);
        assert_eq!(s.mode_flips, 1);
        assert!(summarize_csv("x\n", 1).is_err());
    }

    #[test]
    fn checksum_stable() {
        let t = QTensor::new(1, 3, vec![1, -2, 3], 0.5).unwrap();
        assert_eq!(OutputSummary::of(&t), OutputSummary::of(&t.clone()));
        let u = QTensor::new(1, 3, vec![1, -2, 4], 0.5).unwrap();
        assert_ne!(OutputSummary::of(&t).checksum, OutputSummary::of(&u).checksum);
    }
}
