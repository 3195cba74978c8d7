//! Command-line front end. Exit codes: 0 success, 1 usage or I/O, 2 compile
//! diagnostics, 3 runtime diagnostics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::Priority;
use crate::error::{CompileError, ModelError, RuntimeError};
use crate::model_spec::{parse_model, ModelGraph};
use crate::program::{compile, dump_ir, explain_modes, with_prune, CompiledProgram, Slot};
use crate::report::{latency_ms, sweep_csv, Report, ReportMeta, SweepRow};
use crate::runtime::{random_inputs, run, run_sequential, RunOptions, RunResult, RuntimeBindings};
use crate::{models, HardwareConfig, QTensor};

#[derive(Parser, Debug)]
#[command(name = "trine", version, about = "Compile and simulate multimodal models on a reconfigurable RPU grid")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Compile a model description (file path or bundled model name).
    Compile {
        model: String,
        #[arg(long, default_value = "u50")]
        hw: String,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<String>,
        /// Print the kernel IR to stderr.
        #[arg(long)]
        dump_ir: bool,
        /// Print mode decisions with their reasons to stderr.
        #[arg(long)]
        explain_modes: bool,
    },
    /// Run a compiled program and write a JSON report.
    Simulate {
        program: String,
        #[command(flatten)]
        run: RunArgs,
        /// Run the sequential single-RPU baseline instead of DALO.
        #[arg(long)]
        no_dalo: bool,
        /// Override every pruning rate (0 disables pruning).
        #[arg(long)]
        prune: Option<f64>,
        /// Write the per-block trace CSV here.
        #[arg(long)]
        trace: Option<String>,
        /// Report file; stdout when omitted.
        #[arg(long)]
        report: Option<String>,
    },
    /// Cross product of pruning rates and schedulers as a CSV table.
    Sweep {
        program: String,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated pruning rates.
        #[arg(long, value_delimiter = ',')]
        prune_list: Vec<String>,
        /// Comma-separated schedulers: dalo, sequential.
        #[arg(long, value_delimiter = ',')]
        schedulers: Vec<String>,
        #[arg(short, long)]
        out: Option<String>,
    },
    /// Show mode decisions and placement for a model or compiled program.
    Explain {
        input: String,
        #[arg(long, default_value = "u50")]
        hw: String,
    },
}

#[derive(clap::Args, Debug, Clone)]
struct RunArgs {
    /// JSON file of named input tensors; random inputs when omitted.
    #[arg(long)]
    inputs: Option<String>,
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
    /// Symbol binding `name=value`; repeatable.
    #[arg(long = "bind", value_parser = parse_binding)]
    bind: Vec<(String, usize)>,
    /// Bind every unbound input symbol to its compile-time estimate.
    #[arg(long)]
    bind_estimates: bool,
    /// Track shapes and cycles only.
    #[arg(long)]
    timing_only: bool,
    #[arg(long, value_enum)]
    priority: Option<PriorityArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PriorityArg {
    Lpt,
    Fifo,
}

fn parse_binding(s: &str) -> Result<(String, usize), String> {
    let (k, v) = s.split_once('=').ok_or("expected name=value")?;
    let v = v.parse().map_err(|e| format!("`{v}`: {e}"))?;
    Ok((k.to_string(), v))
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Compile(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Compile(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        CliError::Compile(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Compile(e.to_string())
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Compile(c) => CliError::Compile(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn read(path: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read `{path}`: {e}")))
}

fn write(path: &str, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write `{path}`: {e}")))
}

fn load_model(spec: &str) -> Result<ModelGraph, CliError> {
    if !Path::new(spec).exists() {
        if let Some(m) = models::load(spec) {
            return Ok(m?);
        }
    }
    Ok(parse_model(&read(spec)?)?)
}

fn load_program(path: &str) -> Result<CompiledProgram, CliError> {
    Ok(CompiledProgram::from_json(&read(path)?)?)
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    rows: usize,
    cols: usize,
    scale: f64,
    data: Vec<i8>,
}

fn bindings(prog: &CompiledProgram, args: &RunArgs) -> RuntimeBindings {
    let mut b = RuntimeBindings::new();
    for (k, v) in &args.bind {
        b.set(k, *v);
    }
    if args.bind_estimates {
        b.fill_estimates(&prog.dag);
    }
    b
}

fn inputs(
    prog: &CompiledProgram,
    bind: &RuntimeBindings,
    args: &RunArgs,
) -> Result<BTreeMap<String, QTensor>, CliError> {
    match &args.inputs {
        None => Ok(random_inputs(&prog.dag, bind, args.random_seed)?),
        Some(path) => {
            let raw: BTreeMap<String, TensorFile> = serde_json::from_str(&read(path)?)
                .map_err(|e| CliError::Usage(format!("`{path}`: {e}")))?;
            raw.into_iter()
                .map(|(k, t)| {
                    QTensor::new(t.rows, t.cols, t.data, t.scale)
                        .map(|q| (k.clone(), q))
                        .map_err(|e| CliError::Usage(format!("input `{k}`: {e}")))
                })
                .collect()
        }
    }
}

fn options(args: &RunArgs) -> RunOptions {
    RunOptions {
        seed: args.random_seed,
        functional: !args.timing_only,
        priority: args.priority.map(|p| match p {
            PriorityArg::Lpt => Priority::Lpt,
            PriorityArg::Fifo => Priority::Fifo,
        }),
    }
}

fn model_name(prog: &CompiledProgram) -> String {
    parse_model(&prog.dag.model).map(|g| g.name).unwrap_or_default()
}

fn execute(
    prog: &CompiledProgram,
    sequential: bool,
    inputs: &BTreeMap<String, QTensor>,
    bind: &RuntimeBindings,
    opts: &RunOptions,
) -> Result<RunResult, CliError> {
    let r = if sequential {
        run_sequential(prog, inputs, bind, opts)?
    } else {
        run(prog, inputs, bind, opts)?
    };
    Ok(r)
}

fn cmd_compile(
    model: &str,
    hw: &str,
    out: Option<&str>,
    ir: bool,
    modes: bool,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let g = load_model(model)?;
    let hw = HardwareConfig::load(hw)?;
    let prog = compile(&g, &hw)?;
    if ir {
        let _ = stderr.write_all(dump_ir(&prog.dag).as_bytes());
    }
    if modes {
        let _ = stderr.write_all(explain_modes(&prog.dag).as_bytes());
    }
    match out {
        Some(p) => write(p, &prog.to_json()),
        None => stdout
            .write_all(prog.to_json().as_bytes())
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    program: &str,
    args: &RunArgs,
    no_dalo: bool,
    prune: Option<f64>,
    trace: Option<&str>,
    report: Option<&str>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let mut prog = load_program(program)?;
    if let Some(p) = prune {
        if !(0.0..1.0).contains(&p) {
            return Err(CliError::Usage(format!("--prune {p} outside [0, 1)")));
        }
        prog = with_prune(&prog, p)?;
    }
    let bind = bindings(&prog, args);
    let inputs = inputs(&prog, &bind, args)?;
    let opts = options(args);
    let result = execute(&prog, no_dalo, &inputs, &bind, &opts)?;
    // the baseline only needs cycles
    let baseline = if no_dalo {
        None
    } else {
        let o = RunOptions { functional: false, ..opts };
        Some(execute(&prog, true, &inputs, &bind, &o)?.trace)
    };
    let meta = ReportMeta {
        model: &model_name(&prog),
        hw: &prog.hw.name,
        scheduler: if no_dalo { "sequential" } else { "dalo" },
        prune,
        seed: args.random_seed,
        functional: opts.functional,
        clock_mhz: prog.hw.clock_mhz,
    };
    let rep = Report::new(&meta, &result, baseline.as_ref());
    if let Some(p) = trace {
        write(p, &result.trace.to_csv())?;
    }
    match report {
        Some(p) => write(p, &rep.to_json()),
        None => stdout
            .write_all(rep.to_json().as_bytes())
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn cmd_sweep(
    program: &str,
    args: &RunArgs,
    prune_list: &[String],
    schedulers: &[String],
    out: Option<&str>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let prog = load_program(program)?;
    let mut rates = Vec::new();
    for p in prune_list.iter().filter(|s| !s.trim().is_empty()) {
        let v: f64 = p
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad pruning rate `{p}`")))?;
        if !(0.0..1.0).contains(&v) {
            return Err(CliError::Usage(format!("pruning rate {v} outside [0, 1)")));
        }
        rates.push(v);
    }
    let mut scheds = Vec::new();
    for s in schedulers.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match s {
            "dalo" | "sequential" => scheds.push(s.to_string()),
            other => return Err(CliError::Usage(format!("unknown scheduler `{other}`"))),
        }
    }
    let mut configs: Vec<(f64, String)> = Vec::new();
    if rates.is_empty() && !scheds.is_empty() {
        rates.push(0.0);
    }
    if scheds.is_empty() && !rates.is_empty() {
        scheds.push("dalo".into());
    }
    for &p in &rates {
        for s in &scheds {
            configs.push((p, s.clone()));
        }
    }
    let baseline = (0.0, "dalo".to_string());
    if configs.is_empty() {
        configs.push(baseline.clone());
    }
    configs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    configs.dedup();
    let mut all = configs.clone();
    if !all.contains(&baseline) {
        all.push(baseline.clone());
    }
    let bind = bindings(&prog, args);
    let inputs = inputs(&prog, &bind, args)?;
    let opts = options(args);
    let results: Vec<Result<u64, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = all
            .iter()
            .map(|(p, sched)| {
                let (prog, inputs, bind) = (&prog, &inputs, &bind);
                s.spawn(move || -> Result<u64, CliError> {
                    let prog = with_prune(prog, *p)?;
                    Ok(execute(&prog, sched == "sequential", inputs, bind, &opts)?.trace.makespan)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut makespans = BTreeMap::new();
    for (cfg, r) in all.iter().zip(results) {
        makespans.insert(format!("{}/{}", cfg.0, cfg.1), r?);
    }
    let base = makespans[&format!("{}/{}", baseline.0, baseline.1)];
    let rows: Vec<SweepRow> = configs
        .iter()
        .map(|(p, s)| {
            let m = makespans[&format!("{p}/{s}")];
            SweepRow {
                prune: *p,
                scheduler: s.clone(),
                makespan: m,
                latency_ms: latency_ms(m, prog.hw.clock_mhz),
                speedup: base as f64 / m.max(1) as f64,
            }
        })
        .collect();
    let csv = sweep_csv(&rows);
    match out {
        Some(p) => write(p, &csv),
        None => stdout.write_all(csv.as_bytes()).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn cmd_explain(input: &str, hw: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    let prog = match read(input).ok().map(|t| CompiledProgram::from_json(&t)) {
        Some(Ok(p)) => p,
        _ => compile(&load_model(input)?, &HardwareConfig::load(hw)?)?,
    };
    let mut s = format!(
        "model {} on {} ({}x{} RPUs)\n\n",
        model_name(&prog),
        prog.hw.name,
        prog.hw.grid_rows,
        prog.hw.grid_cols
    );
    s.push_str(&explain_modes(&prog.dag));
    s.push_str("\nplacement\n");
    for b in &prog.dag.blocks {
        let slot = match prog.placement.slots[b.block_id] {
            Slot::Pinned { row, col } => format!("pinned ({row},{col})"),
            Slot::Floating => {
                let (r, c) = prog.placement.assigned[b.block_id];
                format!("floating, hint ({r},{c})")
            }
        };
        s.push_str(&format!("{:<28} {slot}\n", b.name));
    }
    stdout.write_all(s.as_bytes()).map_err(|e| CliError::Usage(e.to_string()))
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let res = match &cli.cmd {
        Cmd::Compile {
            model,
            hw,
            out,
            dump_ir,
            explain_modes,
        } => cmd_compile(model, hw, out.as_deref(), *dump_ir, *explain_modes, stdout, stderr),
        Cmd::Simulate {
            program,
            run,
            no_dalo,
            prune,
            trace,
            report,
        } => cmd_simulate(program, run, *no_dalo, *prune, trace.as_deref(), report.as_deref(), stdout),
        Cmd::Sweep {
            program,
            run,
            prune_list,
            schedulers,
            out,
        } => cmd_sweep(program, run, prune_list, schedulers, out.as_deref(), stdout),
        Cmd::Explain { input, hw } => cmd_explain(input, hw, stdout),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Compile(m) | CliError::Runtime(m) => m,
            };
            let _ = writeln!(stderr, "error: {msg}");
            e.code()
        }
    }
}
