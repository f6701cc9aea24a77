//! Cost-model tables.

use legio_core::cost::{break_even_size, cost_row, CostParams, CostRow, Metric, Rounding, ShrinkCostFn};

use legio_core::ftcomm::Communicator;
use legio_core::simnet::{run_deterministic, spawn_world, FaultSchedule, Step};

use crate::{HarnessError, Result};

pub fn parse_shrink(s: &str) -> Result<ShrinkCostFn, String> {
    match s {
        "linear" => Ok(ShrinkCostFn::Linear),
        "quadratic" => Ok(ShrinkCostFn::Quadratic),
        _ => Err(format!("unknown shrink cost family `{s}` (linear|quadratic|measured)")),
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CostRecord {
    pub s: usize,
    pub k: usize,
    pub cost_master: f64,
    pub cost_nonmaster: f64,
    pub cost_expected: f64,
    pub k_scan: usize,
    pub k_eq3: f64,
    pub k_eq4: f64,
}

impl From<CostRow> for CostRecord {
    fn from(r: CostRow) -> Self {
        CostRecord {
            s: r.s,
            k: r.k,
            cost_master: r.cost_master,
            cost_nonmaster: r.cost_nonmaster,
            cost_expected: r.cost_expected,
            k_scan: r.k_scan,
            k_eq3: r.k_eq3,
            k_eq4: r.k_eq4,
        }
    }
}

/// One row per size. `k` is used when given (capped at `s`), otherwise
/// the scan optimum.
pub fn cost_table(sizes: &[usize], k: Option<usize>, shrink: &ShrinkCostFn) -> Result<Vec<CostRecord>> {
    sizes
        .iter()
        .map(|&s| {
            let k = match k {
                Some(k) => k.min(s),
                None => legio_core::cost::optimal_k(s, shrink).scan,
            };
            let p = CostParams::new(s, k).map_err(|e| HarnessError::config(e.to_string()))?;
            Ok(cost_row(p, shrink).into())
        })
        .collect()
}

/// Sizes 8, 16, ..., 4096.
pub fn default_sizes() -> Vec<usize> {
    (3..=12).map(|e| 1usize << e).collect()
}

/// Break-even sizes for a family, for the summary line.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BreakEven {
    pub master: Option<usize>,
    pub master_ceil: Option<usize>,
    pub expected: Option<usize>,
}

pub fn break_even(shrink: &ShrinkCostFn) -> BreakEven {
    const LIMIT: usize = 4096;
    BreakEven {
        master: break_even_size(shrink, Metric::MasterCase, Rounding::Exact, LIMIT),
        master_ceil: break_even_size(shrink, Metric::MasterCase, Rounding::Ceil, LIMIT),
        expected: break_even_size(shrink, Metric::Expected, Rounding::Exact, LIMIT),
    }
}

impl std::fmt::Display for BreakEven {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |s| s.to_string());
        write!(
            f,
            "break-even s0: master-case {} (whole locals: {}), expected-cost {}; published claim 11",
            show(self.master),
            show(self.master_ceil),
            show(self.expected)
        )
    }
}

/// Shrink latency of a fault-free `n`-process world, in steps, as observed
/// by the slowest member.
pub fn measure_shrink(n: usize, seed: u64) -> Result<Step> {
    let world = spawn_world(n, seed, FaultSchedule::empty()).map_err(|e| HarnessError::config(e.to_string()))?;
    let report = run_deterministic(world, |ctx| async move {
        let comm = Communicator::world(&ctx);
        let start = ctx.now();
        let _ = comm.shrink().await;
        ctx.now() - start
    });
    Ok(report.outputs.into_iter().flatten().max().unwrap_or(0))
}

/// Sample points for a measured table: every size up to 16, then 2^j and
/// 3·2^j up to `limit`.
pub fn table_points(limit: usize) -> Vec<usize> {
    let mut pts: Vec<usize> = (1..=16.min(limit)).collect();
    let mut p = 16;
    while p < limit {
        pts.extend([p * 3 / 2, p * 2].into_iter().filter(|&x| x <= limit));
        p *= 2;
    }
    pts
}

pub fn measured_shrink(limit: usize, seed: u64) -> Result<ShrinkCostFn> {
    let table = table_points(limit)
        .into_iter()
        .map(|n| measure_shrink(n, seed).map(|t| (n, t as f64)))
        .collect::<Result<Vec<_>>>()?;
    ShrinkCostFn::tabulated(table).map_err(|e| HarnessError::config(e.to_string()))
}

/// Resolve a `--shrink` value. `measured` tabulates simulator shrinks up to
/// `limit` processes.
pub fn shrink_family(name: &str, limit: usize, seed: u64) -> Result<ShrinkCostFn> {
    match name {
        "measured" => measured_shrink(limit, seed),
        _ => parse_shrink(name).map_err(HarnessError::Config),
    }
}
