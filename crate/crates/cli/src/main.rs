//! `dawnplan` command-line front end.
//!
//! Machine output (JSON) goes to stdout or `--out`; diagnostics and the
//! human summary line go to stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dawnplan::balance::{compute_balanced, memory_balanced};
use dawnplan::graph::{check_theorem_conditions, load_profile, memory_cdf, save_profile};
use dawnplan::oracle::{exhaustive_plan, verify_theorem};
use dawnplan::partitioner::{fixed_plan, plan, MemOptMode};
use dawnplan::simulator::{simulate, SimConfig, SimReport};
use dawnplan::synthgen::{
    gen_cnn_like_scaled, gen_transformer_like_scaled, gen_uniform, Scale,
};
use dawnplan::units::MIB;
use dawnplan::{ComputationGraph, Error, PartitionPlan, PlanConfig, Schedule};
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_TOO_LARGE: u8 = 3;
const EXIT_THEOREM: u8 = 4;

#[derive(Parser)]
#[command(name = "dawnplan", version, about = "Memory-aware pipeline-parallel planner")]
struct Cli {
    /// Worker threads for planning (default: available parallelism).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic profile.
    Gen(GenArgs),
    /// Memory quantiles and partition-range premises of a profile.
    Stats {
        file: PathBuf,
        #[arg(long, default_value_t = 2)]
        stages: usize,
        #[arg(long, default_value = "16G", value_parser = parse_size)]
        bandwidth: u64,
    },
    /// Search stage boundaries and memory optimizations.
    Plan(PlanArgs),
    /// Replay a plan and report timing and memory.
    Simulate(SimArgs),
    /// Exhaustive reference plan.
    Oracle(PlanArgs),
    /// Check that a two-stage optimum lies between the balanced cuts.
    VerifyTheorem(PlanArgs),
    /// Compute-balanced, memory-balanced and full plans side by side.
    Compare(PlanArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Uniform,
    Transformer,
    Cnn,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    layers: usize,
    #[arg(long, env = "DAWNPLAN_SEED", default_value_t = 0)]
    seed: u64,
    /// Multiplies node times.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Multiplies node memory.
    #[arg(long, default_value_t = 1.0)]
    mem_scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Sync,
    #[value(alias = "async_1f1b", alias = "1f1b")]
    Async,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Sync => Schedule::Sync,
            ScheduleArg::Async => Schedule::Async1F1B,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MemOptArg {
    Greedy,
    Exhaustive,
}

#[derive(Args)]
struct PlanArgs {
    file: PathBuf,
    #[arg(long)]
    stages: usize,
    #[arg(long, value_enum, default_value = "async")]
    schedule: ScheduleArg,
    /// Per-device memory, bytes with optional K/M/G suffix.
    #[arg(long, value_parser = parse_size)]
    capacity: u64,
    /// Link bandwidth in bytes per second, optional K/M/G suffix.
    #[arg(long, default_value = "16G", value_parser = parse_size)]
    bandwidth: u64,
    /// Largest transfer-to-compute ratio tolerated at a cut.
    #[arg(long, default_value_t = 0.5)]
    comm_cap: f64,
    /// Resident micro-batches under the sync schedule (default: stages).
    #[arg(long)]
    micro_batches: Option<usize>,
    #[arg(long, value_enum, default_value = "greedy")]
    memopt: MemOptArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PlanArgs {
    fn config(&self) -> PlanConfig {
        let mut c = PlanConfig::new(self.stages, self.schedule.into(), self.capacity, self.bandwidth);
        c.comm_cap = self.comm_cap;
        if let Some(m) = self.micro_batches {
            c.micro_batches = m;
        }
        c.memopt = match self.memopt {
            MemOptArg::Greedy => MemOptMode::Greedy,
            MemOptArg::Exhaustive => MemOptMode::Exhaustive,
        };
        c
    }
}

#[derive(Args)]
struct SimArgs {
    plan: PathBuf,
    file: PathBuf,
    /// Default: stages for sync, 4x stages for 1F1B.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    micro_batches: Option<u64>,
    /// Replay under another schedule than the plan's.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    /// Treat inter-stage transfers as free.
    #[arg(long)]
    ideal_comm: bool,
    /// Write the event trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Bytes with an optional power-of-1024 suffix: `512`, `64K`, `1.5G`, `8MiB`.
fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let body = lower
        .strip_suffix("ib")
        .or_else(|| lower.strip_suffix('b'))
        .unwrap_or(&lower);
    let (num, mult) = match body.chars().last() {
        Some('k') => (&body[..body.len() - 1], 1u64 << 10),
        Some('m') => (&body[..body.len() - 1], 1 << 20),
        Some('g') => (&body[..body.len() - 1], 1 << 30),
        Some('t') => (&body[..body.len() - 1], 1 << 40),
        _ => (body, 1),
    };
    let bad = || format!("invalid size `{s}`");
    if let Ok(v) = num.parse::<u64>() {
        return v.checked_mul(mult).ok_or_else(bad);
    }
    let v: f64 = num.parse().map_err(|_| bad())?;
    let bytes = v * mult as f64;
    if !(bytes.is_finite() && bytes >= 0.0 && bytes < u64::MAX as f64) || v.fract() != 0.0 && mult == 1 {
        return Err(bad());
    }
    Ok(bytes.round() as u64)
}

fn ms(us: u64) -> String {
    format!("{:.3} ms", us as f64 / 1000.0)
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut o = std::io::stdout().lock();
            o.write_all(text.as_bytes())?;
            o.flush()?;
            Ok(())
        }
    }
}

fn json_text(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn load_plan(path: &Path) -> anyhow::Result<PartitionPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(PartitionPlan::from_json(&text)?)
}

fn summarize(label: &str, p: &PartitionPlan) {
    eprintln!(
        "{label}: {} stages, cuts {:?}, bottleneck {}",
        p.stages.len(),
        p.cuts,
        ms(p.bottleneck_us)
    );
}

fn gen(a: &GenArgs) -> anyhow::Result<()> {
    if !(a.time_scale > 0.0 && a.mem_scale > 0.0) {
        bail!("scales must be positive");
    }
    let base = Scale::default();
    let scale = Scale {
        time_us: base.time_us * a.time_scale,
        mem_bytes: base.mem_bytes * a.mem_scale,
    };
    let g = match a.kind {
        Kind::Uniform => gen_uniform(
            a.layers,
            (1000.0 * a.time_scale).round() as u64,
            (MIB as f64 * a.mem_scale).round() as u64,
        )?,
        Kind::Transformer => gen_transformer_like_scaled(a.layers, a.seed, scale)?,
        Kind::Cnn => gen_cnn_like_scaled(a.layers, a.seed, scale)?,
    };
    match &a.out {
        Some(p) => save_profile(&g, p)?,
        None => emit(None, &(g.to_json() + "\n"))?,
    }
    eprintln!("gen: {} nodes, total time {}", g.len(), ms(g.time(0..g.len())));
    Ok(())
}

fn stats(file: &Path, stages: usize, bandwidth: u64) -> anyhow::Result<()> {
    let g = load_profile(file)?;
    let cdf = memory_cdf(&g);
    let conditions = check_theorem_conditions(&g, stages, bandwidth)?;
    let q = &cdf.activation;
    eprintln!("activation bytes  p50 {}  p80 {}  p90 {}  p99 {}  max {}", q.p50, q.p80, q.p90, q.p99, q.max);
    let q = &cdf.consumed;
    eprintln!("consumed bytes    p50 {}  p80 {}  p90 {}  p99 {}  max {}", q.p50, q.p80, q.p90, q.p99, q.max);
    eprintln!(
        "premises: compute_monotone={} memory_monotone={} comm_dominated={} memopt_evenly_distributed={}",
        conditions.compute_monotone,
        conditions.memory_monotone,
        conditions.comm_dominated,
        conditions.memopt_evenly_distributed
    );
    emit(
        None,
        &json_text(&json!({
            "graph": g.name,
            "nodes": g.len(),
            "total_time_us": g.time(0..g.len()),
            "memory_cdf": cdf,
            "conditions": conditions,
        })),
    )
}

fn run_plan(a: &PlanArgs, exhaustive: bool) -> anyhow::Result<()> {
    let g = load_profile(&a.file)?;
    let cfg = a.config();
    let p = if exhaustive { exhaustive_plan(&g, &cfg)? } else { plan(&g, &cfg)? };
    summarize(if exhaustive { "oracle" } else { "plan" }, &p);
    emit(a.out.as_deref(), &p.to_json())
}

fn sim_config(p: &PartitionPlan, a: &SimArgs) -> SimConfig {
    let mut c = SimConfig::for_plan(p);
    if let Some(s) = a.schedule {
        c.schedule = s.into();
        c.micro_batches = SimConfig::default_micro_batches(c.schedule, p.stages.len());
    }
    if let Some(m) = a.micro_batches {
        c.micro_batches = m as usize;
    }
    if a.ideal_comm {
        c.bandwidth_bps = None;
    }
    c
}

fn run_simulate(a: &SimArgs) -> anyhow::Result<()> {
    let p = load_plan(&a.plan)?;
    let g = load_profile(&a.file)?;
    let report = simulate(&p, &g, &sim_config(&p, a))?;
    if let Some(path) = &a.trace {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_trace_csv(BufWriter::new(f))?;
    }
    eprintln!(
        "simulate: iteration {}, bubble {:.4}, waste {:.4}",
        ms(report.iteration_time_us.round() as u64),
        report.bubble_ratio,
        report.waste_ratio
    );
    if !report.over_capacity.is_empty() {
        eprintln!("warning: stages {:?} exceed capacity", report.over_capacity);
    }
    emit(None, &json_text(&report))
}

fn run_verify(a: &PlanArgs) -> anyhow::Result<bool> {
    let g = load_profile(&a.file)?;
    let v = verify_theorem(&g, &a.config())?;
    eprintln!(
        "verify-theorem: interval {:?}, optimal cuts {:?}, inside={}, premises hold={}",
        v.interval, v.optimal_cuts, v.inside, v.claim_applies
    );
    emit(a.out.as_deref(), &json_text(&v))?;
    Ok(v.passed())
}

fn compare_row(name: &str, g: &ComputationGraph, p: &PartitionPlan) -> anyhow::Result<serde_json::Value> {
    let r: SimReport = simulate(p, g, &SimConfig::for_plan(p))?;
    eprintln!(
        "{name:<18} cuts {:<16} bottleneck {:>12}  waste {:.3}  fits {}",
        format!("{:?}", p.cuts),
        ms(p.bottleneck_us),
        r.waste_ratio,
        p.is_feasible()
    );
    Ok(json!({
        "variant": name,
        "cuts": p.cuts,
        "bottleneck_us": p.bottleneck_us,
        "fits": p.is_feasible(),
        "stage_cost_us": p.stages.iter().map(|s| s.cost()).collect::<Vec<_>>(),
        "sim_peak_bytes": r.per_stage_peak,
        "waste_ratio": r.waste_ratio,
        "bubble_ratio": r.bubble_ratio,
        "throughput": r.throughput,
    }))
}

fn compare(a: &PlanArgs) -> anyhow::Result<()> {
    let g = load_profile(&a.file)?;
    let cfg = a.config();
    let cb = compute_balanced(&g, 0..g.len(), &vec![1.0; cfg.stages])?;
    let mb = memory_balanced(&g, cfg.stages, cfg.schedule)?;
    let mut rows = vec![
        compare_row("compute-balanced", &g, &fixed_plan(&g, &cfg, &cb)?)?,
        compare_row("memory-balanced", &g, &fixed_plan(&g, &cfg, &mb)?)?,
    ];
    match plan(&g, &cfg) {
        Ok(p) => rows.push(compare_row("planner", &g, &p)?),
        Err(e @ Error::Infeasible { .. }) => {
            eprintln!("planner: {e}");
            rows.push(json!({ "variant": "planner", "error": e.to_string() }));
        }
        Err(e) => return Err(e.into()),
    }
    emit(a.out.as_deref(), &json_text(&rows))
}

fn run(cmd: &Cmd) -> anyhow::Result<ExitCode> {
    match cmd {
        Cmd::Gen(a) => gen(a)?,
        Cmd::Stats { file, stages, bandwidth } => stats(file, *stages, *bandwidth)?,
        Cmd::Plan(a) => run_plan(a, false)?,
        Cmd::Oracle(a) => run_plan(a, true)?,
        Cmd::Simulate(a) => run_simulate(a)?,
        Cmd::VerifyTheorem(a) => {
            if !run_verify(a)? {
                eprintln!("error: premises hold but no optimal cut lies in the interval");
                return Ok(ExitCode::from(EXIT_THEOREM));
            }
        }
        Cmd::Compare(a) => compare(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Infeasible { .. }) => EXIT_INFEASIBLE,
        Some(Error::TooLarge { .. }) => EXIT_TOO_LARGE,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n as usize);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match pool.install(|| run(&cli.cmd)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
