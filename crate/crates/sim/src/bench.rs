//! Per-operation benchmarks in counted simulator steps and messages.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use legio_core::flat::Policy;
use legio_core::ftcomm::ReduceOp;
use legio_core::simnet::{run_deterministic, spawn_world, FaultSchedule, RunOutcome, RunReport, Step, Trace};

use crate::comm::{AppComm, Mode, OpOutcome, Status};
use crate::{HarnessError, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Bcast,
    Reduce,
    Allreduce,
    Barrier,
    Gather,
    Scatter,
    File,
}

impl FromStr for BenchOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "bcast" => BenchOp::Bcast,
            "reduce" => BenchOp::Reduce,
            "allreduce" => BenchOp::Allreduce,
            "barrier" => BenchOp::Barrier,
            "gather" => BenchOp::Gather,
            "scatter" => BenchOp::Scatter,
            "file" => BenchOp::File,
            _ => return Err(format!("unknown operation `{s}`")),
        })
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchOp::Bcast => "bcast",
            BenchOp::Reduce => "reduce",
            BenchOp::Allreduce => "allreduce",
            BenchOp::Barrier => "barrier",
            BenchOp::Gather => "gather",
            BenchOp::Scatter => "scatter",
            BenchOp::File => "file",
        })
    }
}

/// Parses `4096`, `1k`, `16M`, or `sweep` (1 KiB to 16 MiB in doublings).
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    if s == "sweep" {
        return Ok((0..15).map(|i| 1024usize << i).collect());
    }
    s.split(',').map(parse_size).collect()
}

fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let (num, mult) = match s.chars().last() {
        Some('k' | 'K') => (&s[..s.len() - 1], 1024),
        Some('m' | 'M') => (&s[..s.len() - 1], 1024 * 1024),
        _ => (s, 1),
    };
    num.parse::<usize>().map(|n| n * mult).map_err(|_| format!("bad message size `{s}`"))
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub procs: usize,
    pub mode: Mode,
    pub k: usize,
    pub threshold: usize,
    pub op: BenchOp,
    pub msg_sizes: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub schedule: FaultSchedule,
    pub policy: Policy,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.procs == 0 {
            return Err(HarnessError::config("procs must be at least 1"));
        }
        if self.reps == 0 {
            return Err(HarnessError::config("reps must be at least 1"));
        }
        if self.mode == Mode::Hier && self.k < 2 {
            return Err(HarnessError::config("hierarchical mode needs k >= 2"));
        }
        self.schedule.validate(self.procs).map_err(|e| HarnessError::config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct BenchRecord {
    pub op: String,
    pub procs: usize,
    pub mode: Mode,
    pub msg_size: usize,
    pub rep: usize,
    pub steps: Step,
    pub messages: u64,
    pub repairs: u32,
    pub outcome: &'static str,
}

#[derive(Copy, Clone, Debug)]
struct Sample {
    start: Step,
    end: Step,
    msgs_start: u64,
    msgs_end: u64,
    outcome: OpOutcome,
}

/// Turns a finished simulation into an error unless it completed or was
/// stopped by the abort policy.
pub fn check_outcome<T>(report: &RunReport<T>) -> Result<()> {
    match &report.outcome {
        RunOutcome::Completed | RunOutcome::Aborted { .. } => Ok(()),
        RunOutcome::Deadlock { blocked, step } => Err(HarnessError::Deadlock { step: *step, blocked: blocked.clone() }),
        RunOutcome::Trapped { step, reason, .. } => Err(HarnessError::Trapped { step: *step, reason: reason.clone() }),
        RunOutcome::StepLimit { step } => Err(HarnessError::StepLimit(*step)),
    }
}

async fn run_op(comm: &AppComm, op: BenchOp, size: usize, rep: usize) -> OpOutcome {
    let n = comm.size();
    let me = comm.rank();
    let fill = (me as u8).wrapping_add(rep as u8);
    match op {
        BenchOp::Bcast => {
            let mut buf = if me == 0 { vec![fill; size] } else { Vec::new() };
            comm.bcast(0, &mut buf).await
        }
        BenchOp::Reduce | BenchOp::Allreduce => {
            let values = vec![me as i64 + rep as i64; size.div_ceil(8).max(1)];
            let mut out = Vec::new();
            if op == BenchOp::Reduce {
                comm.reduce(0, &values, ReduceOp::Sum, &mut out).await
            } else {
                comm.allreduce(&values, ReduceOp::Sum, &mut out).await
            }
        }
        BenchOp::Barrier => comm.barrier().await,
        BenchOp::Gather => {
            let block = vec![fill; size];
            let mut recv = if me == 0 { vec![0u8; size * n] } else { Vec::new() };
            comm.gather(0, &block, &mut recv).await
        }
        BenchOp::Scatter => {
            let send = if me == 0 { vec![fill; size * n] } else { Vec::new() };
            let mut recv = vec![0u8; size];
            comm.scatter(0, &send, &mut recv).await
        }
        BenchOp::File => comm.file_write("bench.dat", me * size, &vec![fill; size]).await,
    }
}

/// Runs `reps` back-to-back calls of the operation for one message size.
/// Each record spans from the earliest start to the latest finish among
/// the processes that completed that repetition.
pub fn run_size(cfg: &BenchConfig, size: usize) -> Result<(Vec<BenchRecord>, Trace)> {
    let mode = cfg.mode.resolve(cfg.procs, cfg.threshold);
    let world = spawn_world(cfg.procs, cfg.seed, cfg.schedule.clone()).map_err(|e| HarnessError::config(e.to_string()))?;
    let samples: Rc<RefCell<Vec<Vec<Sample>>>> = Rc::new(RefCell::new(vec![Vec::new(); cfg.procs]));
    let (k, op, reps, policy) = (cfg.k, cfg.op, cfg.reps, cfg.policy);
    let shared = samples.clone();
    let report = run_deterministic(world, move |ctx| {
        let samples = shared.clone();
        async move {
            let Ok(comm) = AppComm::open(&ctx, mode, k, policy).await else { return };
            comm.barrier().await;
            for rep in 0..reps {
                let (start, msgs_start) = (ctx.now(), ctx.stats().messages());
                let outcome = run_op(&comm, op, size, rep).await;
                let sample = Sample { start, end: ctx.now(), msgs_start, msgs_end: ctx.stats().messages(), outcome };
                samples.borrow_mut()[ctx.me().index()].push(sample);
                if outcome.status == Status::Aborted {
                    return;
                }
            }
        }
    });
    check_outcome(&report)?;
    let samples = samples.borrow();
    let mut records = Vec::new();
    for rep in 0..reps {
        let row: Vec<&Sample> = samples.iter().filter_map(|s| s.get(rep)).collect();
        let (Some(first), Some(last)) = (row.iter().min_by_key(|s| s.start), row.iter().max_by_key(|s| s.end)) else {
            if let RunOutcome::Aborted { step, .. } = report.outcome {
                let start = samples.iter().filter_map(|s| s.last()).map(|s| s.end).min().unwrap_or(step);
                records.push(BenchRecord {
                    op: op.to_string(),
                    procs: cfg.procs,
                    mode,
                    msg_size: size,
                    rep,
                    steps: step.saturating_sub(start),
                    messages: 0,
                    repairs: 0,
                    outcome: Status::Aborted.as_str(),
                });
            }
            break;
        };
        let worst = row
            .iter()
            .map(|s| s.outcome.status)
            .max_by_key(|st| match st {
                Status::Success => 0,
                Status::Skipped => 1,
                Status::Failed => 2,
                Status::Aborted => 3,
            })
            .unwrap_or(Status::Success);
        records.push(BenchRecord {
            op: op.to_string(),
            procs: cfg.procs,
            mode,
            msg_size: size,
            rep,
            steps: last.end - first.start,
            messages: last.msgs_end - first.msgs_start,
            repairs: row.iter().map(|s| s.outcome.repairs).max().unwrap_or(0),
            outcome: worst.as_str(),
        });
    }
    Ok((records, report.trace))
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut all = Vec::new();
    for &size in &cfg.msg_sizes {
        all.extend(run_size(cfg, size)?.0);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode, op: BenchOp) -> BenchConfig {
        BenchConfig {
            procs: 8,
            mode,
            k: 4,
            threshold: 0,
            op,
            msg_sizes: vec![64],
            reps: 2,
            seed: 5,
            schedule: FaultSchedule::empty(),
            policy: Policy::Skip,
        }
    }

    #[test]
    fn sizes() {
        let s = parse_sizes("sweep").unwrap();
        assert_eq!(s.len(), 15);
        assert_eq!((s[0], s[14]), (1024, 16 << 20));
        assert_eq!(parse_sizes("1k,2M,7").unwrap(), [1024, 2 << 20, 7]);
        assert!(parse_sizes("abc").is_err());
    }

    #[test]
    fn all_ops_all_modes_succeed() {
        for mode in [Mode::None, Mode::Flat, Mode::Hier] {
            for op in ["bcast", "reduce", "allreduce", "barrier", "gather", "scatter", "file"] {
                let recs = run_benchmark(&cfg(mode, op.parse().unwrap())).unwrap();
                assert_eq!(recs.len(), 2);
                assert!(recs.iter().all(|r| r.outcome == "success" && r.steps > 0), "{mode} {op}: {recs:?}");
            }
        }
    }

    #[test]
    fn victim_out_of_range_is_config_error() {
        let mut c = cfg(Mode::Flat, BenchOp::Bcast);
        c.schedule = FaultSchedule::new(vec![(legio_core::simnet::ProcessId(9), 3)]).unwrap();
        assert_eq!(run_benchmark(&c).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn threshold_falls_back_to_flat() {
        let mut c = cfg(Mode::Hier, BenchOp::Barrier);
        c.threshold = 64;
        assert!(run_benchmark(&c).unwrap().iter().all(|r| r.mode == Mode::Flat));
    }
}
