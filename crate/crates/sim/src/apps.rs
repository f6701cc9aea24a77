//! Two embarrassingly parallel demo programs.

use std::cell::RefCell;
use std::rc::Rc;

use legio_core::flat::Policy;
use legio_core::simnet::{run_deterministic, spawn_world, FaultSchedule, ProcessId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::check_outcome;
use crate::comm::{AppComm, Mode, Status};
use crate::{HarnessError, Result};

/// Number of square annuli `[l, l+1)` tallied by the Gaussian generator.
pub const ANNULI: usize = 10;

/// Tallies of one process: `[attempted, accepted, annulus 0..ANNULI]`.
pub type EpTally = [i64; ANNULI + 2];

fn stream(seed: u64, rank: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rank as u64);
    rng
}

/// Draws `pairs` candidate pairs with the Marsaglia polar method and
/// tallies the accepted Gaussian pairs by `max(|x|, |y|)`.
pub fn ep_tally(seed: u64, rank: usize, pairs: usize) -> EpTally {
    let mut rng = stream(seed, rank);
    let mut t = [0i64; ANNULI + 2];
    for _ in 0..pairs {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        let s = u * u + v * v;
        t[0] += 1;
        if s <= 0.0 || s >= 1.0 {
            continue;
        }
        let f = (-2.0 * s.ln() / s).sqrt();
        let (x, y) = (u * f, v * f);
        t[1] += 1;
        let l = x.abs().max(y.abs()) as usize;
        if l < ANNULI {
            t[2 + l] += 1;
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpReport {
    /// Summed tallies as seen by the lowest surviving rank.
    pub total: EpTally,
    pub status: Status,
    pub repairs: u32,
    pub survivors: Vec<usize>,
}

impl EpReport {
    pub fn acceptance(&self) -> f64 {
        self.total[1] as f64 / self.total[0].max(1) as f64
    }
}

pub fn run_ep_app(procs: usize, mode: Mode, k: usize, pairs: usize, seed: u64, schedule: FaultSchedule) -> Result<EpReport> {
    if pairs == 0 {
        return Err(HarnessError::config("pairs per process must be at least 1"));
    }
    schedule.validate(procs).map_err(|e| HarnessError::config(e.to_string()))?;
    let world = spawn_world(procs, seed, schedule).map_err(|e| HarnessError::config(e.to_string()))?;
    let report = run_deterministic(world, move |ctx| async move {
        let comm = AppComm::open(&ctx, mode, k, Policy::Skip).await.ok()?;
        let mine = ep_tally(seed, comm.rank(), pairs);
        let mut total = Vec::new();
        let o = comm.sum(&mine, &mut total).await;
        Some((total, o))
    });
    check_outcome(&report)?;
    let survivors: Vec<usize> = (0..procs).filter(|&r| report.outputs[r].is_some()).collect();
    let first = survivors.first().and_then(|&r| report.outputs[r].clone().flatten());
    let Some((total, o)) = first else {
        return Err(HarnessError::config("no process survived"));
    };
    let mut t = [0i64; ANNULI + 2];
    if o.is_success() {
        t.copy_from_slice(&total);
    }
    Ok(EpReport { total: t, status: o.status, repairs: o.repairs, survivors })
}

/// Placeholder score of tasks nobody delivered.
pub const SENTINEL: f64 = -1.0;

/// Deterministic stand-in for a docking score, in `[0, 1)`.
pub fn pseudo_score(task: u64) -> f64 {
    let mut h = task ^ 0x9E37_79B9_7F4A_7C15;
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Tasks of original rank `r`: a contiguous block.
pub fn tasks_of(r: usize, procs: usize, n_tasks: usize) -> std::ops::Range<usize> {
    let per = n_tasks.div_ceil(procs);
    (r * per).min(n_tasks)..((r + 1) * per).min(n_tasks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FarmReport {
    /// Score per task at the root; `SENTINEL` where none arrived.
    pub scores: Vec<f64>,
    /// Best `(task, score)` pairs, highest first.
    pub top: Vec<(usize, f64)>,
    pub status: Status,
    pub repairs: u32,
}

pub fn run_task_farm(procs: usize, mode: Mode, k: usize, n_tasks: usize, top_n: usize, seed: u64, schedule: FaultSchedule) -> Result<FarmReport> {
    if n_tasks < procs {
        return Err(HarnessError::config("need at least one task per process"));
    }
    if schedule.crash_step(ProcessId(0)).is_some() {
        return Err(HarnessError::config("rank 0 collects the scores and must not be scheduled to crash"));
    }
    schedule.validate(procs).map_err(|e| HarnessError::config(e.to_string()))?;
    let per = n_tasks.div_ceil(procs);
    let world = spawn_world(procs, seed, schedule).map_err(|e| HarnessError::config(e.to_string()))?;
    let result: Rc<RefCell<Option<(Vec<u8>, Status, u32)>>> = Rc::default();
    let shared = result.clone();
    let report = run_deterministic(world, move |ctx| {
        let result = shared.clone();
        async move {
            let Ok(comm) = AppComm::open(&ctx, mode, k, Policy::Skip).await else { return };
            comm.barrier().await;
            let me = comm.rank();
            let mut block = Vec::with_capacity(per * 8);
            let mine = tasks_of(me, procs, n_tasks);
            for slot in 0..per {
                let task = mine.start + slot;
                let score = if task < mine.end { pseudo_score(task as u64) } else { SENTINEL };
                block.extend_from_slice(&score.to_le_bytes());
            }
            let mut recv = if me == 0 { SENTINEL.to_le_bytes().repeat(per * procs) } else { Vec::new() };
            let o = comm.gather(0, &block, &mut recv).await;
            if me == 0 {
                *result.borrow_mut() = Some((recv, o.status, o.repairs));
            }
        }
    });
    check_outcome(&report)?;
    let (bytes, status, repairs) = result.borrow_mut().take().ok_or_else(|| HarnessError::config("root did not finish"))?;
    let mut scores = vec![SENTINEL; n_tasks];
    for r in 0..procs {
        for (slot, task) in tasks_of(r, procs, n_tasks).enumerate() {
            let at = (r * per + slot) * 8;
            scores[task] = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        }
    }
    let mut top: Vec<(usize, f64)> = scores.iter().copied().enumerate().filter(|&(_, s)| s != SENTINEL).collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    top.truncate(top_n);
    Ok(FarmReport { scores, top, status, repairs })
}
