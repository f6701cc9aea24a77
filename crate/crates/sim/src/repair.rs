//! Repair measurements: one crash, one collective, and what the trace says
//! about who repaired and for how long.

use std::fmt;
use std::str::FromStr;

use legio_core::flat::Policy;
use legio_core::hier::RepairReport;
use legio_core::simnet::{run_deterministic, spawn_world, FaultSchedule, ProcessId, Step, Trace};

use crate::bench::check_outcome;
use crate::comm::{AppComm, Mode};
use crate::{HarnessError, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum VictimKind {
    Master,
    NonMaster,
    Flat,
}

impl FromStr for VictimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "master" => Ok(VictimKind::Master),
            "nonmaster" => Ok(VictimKind::NonMaster),
            "flat" => Ok(VictimKind::Flat),
            _ => Err(format!("unknown victim kind `{s}` (master|nonmaster|flat)")),
        }
    }
}

impl fmt::Display for VictimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VictimKind::Master => "master",
            VictimKind::NonMaster => "nonmaster",
            VictimKind::Flat => "flat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct RepairRecord {
    pub procs: usize,
    pub mode: Mode,
    pub k: usize,
    pub victim_kind: String,
    pub victim: usize,
    pub participants: usize,
    pub steps: Step,
    pub events: usize,
    pub repairs: u32,
}

/// A repair measurement together with its raw material.
pub struct RepairRun {
    pub record: RepairRecord,
    pub report: RepairReport,
    pub trace: Trace,
    /// Step at which the victim crashed.
    pub crash_step: Step,
}

/// Picks the victim: the master of the second local, the rank after it,
/// or rank 1 for the flat mode.
pub fn victim_for(procs: usize, mode: Mode, k: usize, kind: VictimKind) -> Result<usize> {
    let v = match (mode, kind) {
        (Mode::Hier, VictimKind::Master) => k,
        (Mode::Hier, VictimKind::NonMaster) => k + 1,
        (Mode::Flat, VictimKind::Flat) => 1,
        (Mode::Flat, _) => return Err(HarnessError::config("flat mode has no masters; use --victim flat")),
        (Mode::Hier, VictimKind::Flat) => return Err(HarnessError::config("use --victim master|nonmaster in hier mode")),
        (Mode::None, _) => return Err(HarnessError::config("repair needs mode flat or hier")),
    };
    if v >= procs {
        return Err(HarnessError::config(format!("victim {v} does not exist with {procs} processes")));
    }
    Ok(v)
}

/// Step by which every process has set up its communicator and passed one
/// barrier, in a fault-free run.
pub fn ready_step(procs: usize, mode: Mode, k: usize, seed: u64) -> Result<Step> {
    let world = spawn_world(procs, seed, FaultSchedule::empty()).map_err(|e| HarnessError::config(e.to_string()))?;
    let report = run_deterministic(world, move |ctx| async move {
        let comm = AppComm::open(&ctx, mode, k, Policy::Skip).await.ok()?;
        comm.barrier().await;
        Some(ctx.now())
    });
    check_outcome(&report)?;
    Ok(report.outputs.iter().flatten().flatten().copied().max().unwrap_or(0))
}

pub fn run_repair_bench(procs: usize, mode: Mode, k: usize, kind: VictimKind, seed: u64) -> Result<RepairRun> {
    if mode == Mode::Hier && k < 2 {
        return Err(HarnessError::config("hierarchical mode needs k >= 2"));
    }
    let victim = victim_for(procs, mode, k, kind)?;
    let at = ready_step(procs, mode, k, seed)?;
    let schedule = FaultSchedule::new(vec![(ProcessId(victim as u32), at)]).expect("one victim");
    let world = spawn_world(procs, seed, schedule).map_err(|e| HarnessError::config(e.to_string()))?;
    let run = run_deterministic(world, move |ctx| async move {
        let comm = AppComm::open(&ctx, mode, k, Policy::Skip).await.ok()?;
        comm.barrier().await;
        let mut out = Vec::new();
        Some(comm.sum(&[1], &mut out).await.repairs)
    });
    check_outcome(&run)?;
    let report = RepairReport::from_trace_window(&run.trace, at, Step::MAX);
    let record = RepairRecord {
        procs,
        mode,
        k,
        victim_kind: kind.to_string(),
        victim,
        participants: report.participants.len(),
        steps: report.steps,
        events: report.events,
        repairs: run.outputs.iter().flatten().flatten().copied().max().unwrap_or(0),
    };
    Ok(RepairRun { record, report, trace: run.trace, crash_step: at })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn victims() {
        assert_eq!(victim_for(64, Mode::Hier, 8, VictimKind::Master).unwrap(), 8);
        assert_eq!(victim_for(64, Mode::Hier, 8, VictimKind::NonMaster).unwrap(), 9);
        assert_eq!(victim_for(64, Mode::Flat, 8, VictimKind::Master).unwrap_err().exit_code(), 2);
        assert!(victim_for(4, Mode::Hier, 4, VictimKind::Master).is_err());
    }

    #[test]
    fn nonmaster_repair_is_local() {
        let r = run_repair_bench(32, Mode::Hier, 8, VictimKind::NonMaster, 1).unwrap();
        assert!(r.record.participants <= 7);
        assert!(r.report.participants.iter().all(|p| (8..16).contains(&p.index())));
        assert_eq!(r.record.repairs, 1);
    }
}
