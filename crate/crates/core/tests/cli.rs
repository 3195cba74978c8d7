use trine::cli::main_with_args;
use trine::report::summarize_csv;

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with_args(std::iter::once("trine").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

struct TempDir(std::path::PathBuf);

impl TempDir {
    fn new(tag: &str) -> Self {
        let p = std::env::temp_dir().join(format!("trine-cli-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&p).unwrap();
        TempDir(p)
    }
    fn path(&self, name: &str) -> String {
        self.0.join(name).to_string_lossy().into_owned()
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.0).ok();
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new("codes");
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(cli(&["--help"]).0, 0);
    assert_eq!(cli(&["compile", "/nonexistent/model.json"]).0, 1);

    let empty = dir.path("empty.json");
    std::fs::write(&empty, r#"{"name":"e","layers":[],"edges":[],"inputs":[],"outputs":[]}"#).unwrap();
    let (code, _, err) = cli(&["compile", &empty]);
    assert_eq!(code, 2, "{err}");

    let prog = dir.path("p.json");
    assert_eq!(cli(&["compile", "tinyclip_a", "-o", &prog]).0, 0);
    let (code, _, err) = cli(&["simulate", &prog]);
    assert_eq!(code, 3);
    assert!(err.contains("txt.tok.T"), "{err}");
    assert_eq!(cli(&["simulate", &prog, "--bind", "txt.tok.T=77", "--timing-only"]).0, 0);
}

#[test]
fn report_matches_trace() {
    let dir = TempDir::new("report");
    let prog = dir.path("p.json");
    let (trace, report) = (dir.path("t.csv"), dir.path("r.json"));
    assert_eq!(cli(&["compile", "missiongnn_k", "-o", &prog]).0, 0);
    let (code, _, err) =
        cli(&["simulate", &prog, "--bind-estimates", "--trace", &trace, "--report", &report]);
    assert_eq!(code, 0, "{err}");
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let util = rep["rpu_utilization"].as_array().unwrap();
    let sum = summarize_csv(&std::fs::read_to_string(&trace).unwrap(), util.len()).unwrap();
    assert_eq!(rep["makespan_cycles"].as_u64().unwrap(), sum.makespan);
    assert_eq!(rep["total_block_cycles"].as_u64().unwrap(), sum.total_cycles);
    assert_eq!(rep["mode_flips"].as_u64().unwrap() as usize, sum.mode_flips);
    for (u, s) in util.iter().zip(&sum.utilization) {
        assert!((u.as_f64().unwrap() - s).abs() < 1e-9);
    }
    let clock = rep["clock_mhz"].as_f64().unwrap();
    let want_ms = sum.makespan as f64 / (clock * 1e3);
    assert!((rep["latency_ms"].as_f64().unwrap() - want_ms).abs() < 1e-12);
    assert!(rep["speedup_vs_sequential"].as_f64().unwrap() >= 1.0);
}

#[test]
fn recompile_is_byte_identical() {
    let a = cli(&["compile", "mdetr_e"]).1;
    let b = cli(&["compile", "mdetr_e"]).1;
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn sweep_rows() {
    let dir = TempDir::new("sweep");
    let prog = dir.path("p.json");
    assert_eq!(cli(&["compile", "tinyclip_b", "-o", &prog]).0, 0);
    let run = |extra: &[&str]| {
        let mut args = vec!["sweep", prog.as_str(), "--bind-estimates", "--timing-only"];
        args.extend_from_slice(extra);
        let (code, out, err) = cli(&args);
        assert_eq!(code, 0, "{err}");
        out
    };
    let out = run(&["--prune-list", "0,0.2", "--schedulers", "dalo,sequential"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "config,prune,scheduler,makespan,latency_ms,speedup");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("p=0/dalo,"), "{}", lines[1]);
    let speedup: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(speedup, 1.0);

    assert_eq!(run(&[]).lines().count(), 2);
    let base_only = run(&["--prune-list", "", "--schedulers", ""]);
    assert_eq!(base_only.lines().count(), 2);
    assert_eq!(run(&["--prune-list", "0,0.1,0.2,0.3"]).lines().count(), 1 + 4);
}

#[test]
fn schedulers_agree_on_one_rpu() {
    let dir = TempDir::new("one");
    let prog = dir.path("p.json");
    assert_eq!(cli(&["compile", "tinyclip_b", "--hw", "zcu104", "-o", &prog]).0, 0);
    let (code, out, err) =
        cli(&["sweep", &prog, "--bind-estimates", "--timing-only", "--schedulers", "dalo,sequential"]);
    assert_eq!(code, 0, "{err}");
    let makespans: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(makespans.len(), 2);
    assert_eq!(makespans[0], makespans[1]);
}
