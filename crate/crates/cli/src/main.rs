//! `gpusim` — deterministic cycle-level GPU timing simulation from the
//! command line.
//!
//! Exit codes: 0 success, 1 determinism mismatch (verify) or internal
//! invariant breach, 2 bad input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gpusim_core::bench::{self, Workload};
use gpusim_core::engine::{self, PolicyKind, SchedulePolicy};
use gpusim_core::stats::{diff_reports, render_report, DiffOutcome};
use gpusim_core::trace::gen::{generate_workload, Preset};
use gpusim_core::trace::{parse_trace, render_trace, TraceProgram};
use gpusim_core::GpuConfig;

/// Environment override for `--workers`, in the spirit of OMP_NUM_THREADS.
const WORKERS_ENV: &str = "GPUSIM_NUM_THREADS";

#[derive(Parser)]
#[command(
    name = "gpusim",
    version,
    about = "Deterministic parallel GPU timing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trace and write the canonical stats report.
    Run(RunArgs),
    /// Re-run a trace under several policies/worker counts and check that
    /// every report is byte-identical to the sequential baseline.
    Verify(VerifyArgs),
    /// Generate a synthetic workload trace.
    Gen(GenArgs),
    /// Sweep worker counts, recording wall times, speedups and digests.
    Bench(BenchArgs),
    /// Print per-phase wall-time shares for one run.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct MachineArgs {
    /// Machine description file; the built-in default profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl MachineArgs {
    fn load(&self) -> Result<GpuConfig> {
        match &self.config {
            None => Ok(GpuConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                GpuConfig::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
            }
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    machine: MachineArgs,
    /// Workload trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Worker count for the SM phase (or set GPUSIM_NUM_THREADS).
    #[arg(long)]
    workers: Option<usize>,
    /// SM loop schedule: seq, static or dynamic.
    #[arg(long, default_value = "seq")]
    schedule: String,
    /// Iterations per scheduling chunk.
    #[arg(long, default_value_t = 1)]
    chunk: usize,
    /// Where the canonical report is written.
    #[arg(long, default_value = "gpusim-stats.txt")]
    stats_out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    machine: MachineArgs,
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated worker counts, e.g. 2,4,8,16.
    #[arg(long, default_value = "2,4,8,16")]
    workers_list: String,
    /// Comma-separated schedules to check against the sequential baseline.
    #[arg(long, default_value = "static,dynamic")]
    schedules: String,
}

#[derive(Args)]
struct GenArgs {
    /// Workload preset: two_cta, balanced, imbalanced or memory_heavy.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scale: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    machine: MachineArgs,
    /// Bench a single trace instead of the built-in workload suite.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated worker counts.
    #[arg(long, default_value = "1,2,4,8,16")]
    workers: String,
    /// Schedule measured in the sweep: static or dynamic.
    #[arg(long, default_value = "static")]
    schedule: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Raw per-repeat CSV.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    /// Speedup/efficiency summary CSV.
    #[arg(long)]
    summary_out: Option<PathBuf>,
    /// Also compare static vs dynamic schedules into this CSV.
    #[arg(long)]
    compare_out: Option<PathBuf>,
    /// Print the Pearson correlation between sequential wall time and the
    /// speedup at the highest worker count.
    #[arg(long)]
    correlate: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    machine: MachineArgs,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "seq")]
    schedule: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Profile(args) => cmd_profile(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn parse_policy(schedule: &str, workers: Option<usize>, chunk: usize) -> Result<SchedulePolicy> {
    let kind = PolicyKind::parse(schedule)
        .ok_or_else(|| anyhow!("unknown schedule `{schedule}` (seq, static or dynamic)"))?;
    let workers = match workers {
        Some(w) => w,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .parse()
                .map_err(|_| anyhow!("{WORKERS_ENV} must be an integer, got `{v}`"))?,
            Err(_) => 1,
        },
    };
    if workers == 0 {
        bail!("--workers must be positive");
    }
    if chunk == 0 {
        bail!("--chunk must be positive");
    }
    Ok(SchedulePolicy {
        kind,
        workers,
        chunk,
    })
}

fn load_trace(path: &Path) -> Result<TraceProgram> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading trace {}", path.display()))?;
    parse_trace(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn parse_list(list: &str, what: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("invalid {what} list `{list}`"))?;
    if out.is_empty() {
        bail!("{what} list must not be empty");
    }
    if out.contains(&0) {
        bail!("{what} list entries must be positive");
    }
    Ok(out)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let cfg = args.machine.load()?;
    let program = load_trace(&args.trace)?;
    let policy = parse_policy(&args.schedule, args.workers, args.chunk)?;
    let started = Instant::now();
    let out = engine::run(&cfg, &program, &policy).map_err(|e| anyhow!("{e}"))?;
    let wall = started.elapsed().as_secs_f64();
    let report = render_report(&out.stats);
    std::fs::write(&args.stats_out, &report)
        .with_context(|| format!("writing {}", args.stats_out.display()))?;
    println!("cycles = {}", out.stats.cycles);
    println!("wall_seconds = {wall:.6}");
    println!("report = {}", args.stats_out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let cfg = args.machine.load()?;
    let program = load_trace(&args.trace)?;
    let workers = parse_list(&args.workers_list, "workers")?;
    let schedules: Vec<PolicyKind> = args
        .schedules
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            PolicyKind::parse(s.trim()).ok_or_else(|| anyhow!("unknown schedule `{}`", s.trim()))
        })
        .collect::<Result<_>>()?;
    if schedules.is_empty() {
        bail!("schedules list must not be empty");
    }

    let baseline =
        engine::run(&cfg, &program, &SchedulePolicy::sequential()).map_err(|e| anyhow!("{e}"))?;
    let base_report = render_report(&baseline.stats);
    println!(
        "baseline seq/1: cycles = {}, digest = {:016x}",
        baseline.stats.cycles,
        bench::digest(&base_report)
    );

    let mut failures = 0;
    for &kind in &schedules {
        for &w in &workers {
            let policy = SchedulePolicy::new(kind, w);
            let out = engine::run(&cfg, &program, &policy).map_err(|e| anyhow!("{e}"))?;
            let report = render_report(&out.stats);
            match diff_reports(&base_report, &report).map_err(|e| anyhow!("{e}"))? {
                DiffOutcome::Equal => println!("ok       {kind}/{w}"),
                DiffOutcome::Differs { key, left, right } => {
                    failures += 1;
                    println!("MISMATCH {kind}/{w}: first differing key {key} ({left} != {right})");
                }
            }
        }
    }
    if failures == 0 {
        println!("verified: all reports byte-identical");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("determinism violated in {failures} cell(s)");
        Ok(ExitCode::from(1))
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let preset =
        Preset::parse(&args.preset).ok_or_else(|| anyhow!("unknown preset `{}`", args.preset))?;
    if args.scale == 0 {
        bail!("--scale must be positive");
    }
    let program = generate_workload(preset, args.seed, args.scale);
    std::fs::write(&args.out, render_trace(&program))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let s = gpusim_core::trace_stats(&program);
    println!(
        "generated {}: {} kernels, {} instructions",
        args.out.display(),
        s.ctas_per_kernel.len(),
        s.total()
    );
    Ok(ExitCode::SUCCESS)
}

/// The built-in bench suite: spans the few-CTA pathology, balanced grids at
/// three sizes, a long-tailed grid and a memory-bound stream.
fn builtin_suite() -> Vec<(&'static str, Preset, u64, u32)> {
    vec![
        ("two_cta", Preset::TwoCta, 1, 4),
        ("memory_heavy", Preset::MemoryHeavy, 1, 1),
        ("imbalanced_m", Preset::Imbalanced, 1, 2),
        ("balanced_s", Preset::Balanced, 1, 1),
        ("balanced_m", Preset::Balanced, 1, 4),
        ("balanced_l", Preset::Balanced, 1, 24),
    ]
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let cfg = args.machine.load()?;
    let workers = parse_list(&args.workers, "workers")?;
    let kind = PolicyKind::parse(&args.schedule)
        .ok_or_else(|| anyhow!("unknown schedule `{}`", args.schedule))?;
    if kind == PolicyKind::Sequential {
        bail!("--schedule must be static or dynamic (the sequential baseline always runs)");
    }

    let workloads: Vec<Workload> = match &args.trace {
        Some(path) => vec![Workload::new(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "trace".into()),
            load_trace(path)?,
        )],
        None => builtin_suite()
            .into_iter()
            .map(|(name, preset, seed, scale)| {
                Workload::new(name, generate_workload(preset, seed, scale))
            })
            .collect(),
    };

    // One row per (workload, worker count, repeat); speedups fall back to
    // the policy's own lowest-worker cell when no sequential cell exists.
    let records = bench::sweep(&cfg, &workloads, &workers, &[kind], args.repeats)
        .map_err(|e| anyhow!("{e}"))?;
    std::fs::write(&args.out, bench::render_records_csv(&records))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("bench records written to {}", args.out.display());

    let table = bench::SpeedupTable::build(&records);
    if let Some(path) = &args.summary_out {
        std::fs::write(path, bench::render_speedup_csv(&table))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("speedup summary written to {}", path.display());
    }

    if args.correlate {
        let max_workers = *workers.iter().max().unwrap();
        match bench::correlate(&records, kind, max_workers).map_err(|e| anyhow!("{e}"))? {
            Some(r) => println!("pearson_r(seq_seconds, speedup@{max_workers}) = {r:.4}"),
            None => println!("pearson_r undefined (zero variance)"),
        }
    }

    if let Some(path) = &args.compare_out {
        let rows = bench::scheduler_compare(&cfg, &workloads, &workers, args.repeats)
            .map_err(|e| anyhow!("{e}"))?;
        let mut csv = String::from("workload,workers,static_speedup,dynamic_speedup\n");
        for row in rows {
            csv.push_str(&format!(
                "{},{},{:.4},{:.4}\n",
                row.workload, row.workers, row.static_speedup, row.dynamic_speedup
            ));
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        println!("scheduler comparison written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(args: ProfileArgs) -> Result<ExitCode> {
    let cfg = args.machine.load()?;
    let program = load_trace(&args.trace)?;
    let policy = parse_policy(&args.schedule, args.workers, 1)?;
    let out = engine::run(&cfg, &program, &policy).map_err(|e| anyhow!("{e}"))?;
    println!("cycles = {}", out.stats.cycles);
    for (name, share) in out.profile.shares() {
        println!("{name:<14} {share:>7.4}");
    }
    Ok(ExitCode::SUCCESS)
}
