use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use legio_core::flat::Policy;
use legio_core::simnet::{FaultSchedule, Trace};
use legio_sim::apps::{run_ep_app, run_task_farm};
use legio_sim::bench::{parse_sizes, run_size, BenchConfig, BenchOp};
use legio_sim::comm::{parse_policy, Mode};
use legio_sim::costtab::{break_even, cost_table, default_sizes, shrink_family};
use legio_sim::repair::{run_repair_bench, VictimKind};
use legio_sim::schedule::parse_fault_schedule;
use legio_sim::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "legio-sim", about = "Fault-resilient communicators on a simulated process world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[arg(long, global = true, default_value_t = 8)]
    procs: usize,
    #[arg(long, global = true, default_value = "flat", value_parser = str::parse::<Mode>)]
    mode: Mode,
    /// Maximum local size of the hierarchy.
    #[arg(long, global = true, default_value_t = 8)]
    k: usize,
    /// Use the hierarchy only from this many processes up.
    #[arg(long, global = true, default_value_t = 0)]
    hier_threshold: usize,
    #[arg(long, global = true, default_value = "bcast", value_parser = str::parse::<BenchOp>)]
    op: BenchOp,
    /// Bytes per call: `4096`, `1k`, `16M`, a comma list, or `sweep`.
    #[arg(long, global = true, default_value = "1k")]
    msg_size: String,
    #[arg(long, global = true, default_value_t = 1)]
    reps: usize,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Crash schedule file with `victim,at_step` lines.
    #[arg(long, global = true)]
    schedule: Option<PathBuf>,
    #[arg(long, global = true, default_value = "skip", value_parser = parse_policy)]
    on_failure: Policy,
    /// Write CSV here instead of stdout.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Write the event trace of the last simulation here.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-operation cost in steps and messages.
    Bench,
    /// Inject one crash and measure the repair.
    Repair {
        #[arg(long, default_value = "nonmaster", value_parser = str::parse::<VictimKind>)]
        victim: VictimKind,
    },
    /// Gaussian pair generator with tallies summed across processes.
    Ep {
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
    },
    /// Statically partitioned scoring farm gathered at rank 0.
    Farm {
        #[arg(long, default_value_t = 1130)]
        tasks: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Repair-cost model table.
    Cost {
        /// `linear`, `quadratic`, or `measured` (simulator shrink latencies).
        #[arg(long, default_value = "linear")]
        shrink: String,
        /// Single size instead of the 8..4096 sweep.
        #[arg(long)]
        size: Option<usize>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout()),
    })
}

fn write_csv<T: serde::Serialize>(path: &Option<PathBuf>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(output(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Option<PathBuf>, trace: &Trace) -> Result<()> {
    if let Some(p) = path {
        let mut f = File::create(p)?;
        writeln!(f, "step,kind,src,dst,tag,detail")?;
        f.write_all(trace.to_lines().as_bytes())?;
    }
    Ok(())
}

fn schedule(cli: &Cli) -> Result<FaultSchedule> {
    match &cli.schedule {
        Some(p) => parse_fault_schedule(p, cli.procs).map_err(|e| HarnessError::config(e.to_string())),
        None => Ok(FaultSchedule::empty()),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mode = cli.mode.resolve(cli.procs, cli.hier_threshold);
    match &cli.cmd {
        Cmd::Bench => {
            let cfg = BenchConfig {
                procs: cli.procs,
                mode: cli.mode,
                k: cli.k,
                threshold: cli.hier_threshold,
                op: cli.op,
                msg_sizes: parse_sizes(&cli.msg_size).map_err(HarnessError::Config)?,
                reps: cli.reps,
                seed: cli.seed,
                schedule: schedule(cli)?,
                policy: cli.on_failure,
            };
            cfg.validate()?;
            let mut rows = Vec::new();
            let mut last = Trace::default();
            for &size in &cfg.msg_sizes {
                let (r, t) = run_size(&cfg, size)?;
                rows.extend(r);
                last = t;
            }
            write_trace(&cli.trace, &last)?;
            write_csv(&cli.csv, &rows)
        }
        Cmd::Repair { victim } => {
            let run = run_repair_bench(cli.procs, mode, cli.k, *victim, cli.seed)?;
            write_trace(&cli.trace, &run.trace)?;
            write_csv(&cli.csv, &[run.record])
        }
        Cmd::Ep { pairs } => {
            let r = run_ep_app(cli.procs, mode, cli.k, *pairs, cli.seed, schedule(cli)?)?;
            let mut out = output(&cli.csv)?;
            writeln!(out, "status={} repairs={} survivors={}", r.status.as_str(), r.repairs, r.survivors.len())?;
            writeln!(out, "attempted={} accepted={} ratio={:.6}", r.total[0], r.total[1], r.acceptance())?;
            for (l, c) in r.total[2..].iter().enumerate() {
                writeln!(out, "annulus {l}: {c}")?;
            }
            Ok(())
        }
        Cmd::Farm { tasks, top } => {
            let r = run_task_farm(cli.procs, mode, cli.k, *tasks, *top, cli.seed, schedule(cli)?)?;
            let mut out = output(&cli.csv)?;
            let missing = r.scores.iter().filter(|&&s| s == legio_sim::apps::SENTINEL).count();
            writeln!(out, "status={} repairs={} missing={missing}", r.status.as_str(), r.repairs)?;
            for (task, score) in &r.top {
                writeln!(out, "{task},{score:.6}")?;
            }
            Ok(())
        }
        Cmd::Cost { shrink, size } => {
            let sizes = size.map_or_else(default_sizes, |s| vec![s]);
            let family = shrink_family(shrink, sizes.iter().copied().max().unwrap_or(1), cli.seed)?;
            let k = (cli.k != 8 || size.is_some()).then_some(cli.k);
            let rows = cost_table(&sizes, k, &family)?;
            write_csv(&cli.csv, &rows)?;
            eprintln!("{}", break_even(&family));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("legio-sim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
