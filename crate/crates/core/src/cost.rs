//! Analytical repair-cost model for hierarchical communicators.
//!
//! `S(x)` is the cost of shrinking a communicator of `x` processes. A lost
//! master costs `S(k) + 2 S(k+1) + S(ceil(s/k))` (local, two POVs, global);
//! any other loss costs `S(k)`.

use alloc::vec::Vec;

/// Shrink cost as a function of communicator size.
#[derive(Clone, Debug, PartialEq)]
pub enum ShrinkCostFn {
    Linear,
    Quadratic,
    /// Measured `(size, cost)` points, linearly interpolated. Sizes past
    /// the last point extend the last segment's slope. An empty table is
    /// the zero function.
    Tabulated(Vec<(usize, f64)>),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("need 2 <= k <= s, got s={s} k={k}")]
    InvalidParams { s: usize, k: usize },
    #[error("table must be sorted by size with non-decreasing, non-negative costs")]
    BadTable,
}

impl ShrinkCostFn {
    /// Checks a measured table and sorts nothing: points must already be in
    /// size order.
    pub fn tabulated(points: Vec<(usize, f64)>) -> Result<Self, CostError> {
        let sorted = points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1);
        if !sorted || points.iter().any(|p| !(p.1 >= 0.0)) {
            return Err(CostError::BadTable);
        }
        Ok(ShrinkCostFn::Tabulated(points))
    }

    pub fn evaluate(&self, x: usize) -> f64 {
        self.evaluate_at(x as f64)
    }

    /// Cost at a fractional size, for the undivided closed form.
    pub fn evaluate_at(&self, xf: f64) -> f64 {
        if xf <= 0.0 {
            return 0.0;
        }
        match self {
            ShrinkCostFn::Linear => xf,
            ShrinkCostFn::Quadratic => xf * xf,
            ShrinkCostFn::Tabulated(pts) => interpolate(pts, xf),
        }
    }
}

fn interpolate(pts: &[(usize, f64)], x: f64) -> f64 {
    let Some(&(x_last, y_last)) = pts.last() else { return 0.0 };
    // (0, 0) is an implicit first point.
    let mut prev = (0.0, 0.0);
    for &(px, py) in pts {
        let px = px as f64;
        if x <= px {
            if px == prev.0 {
                return py;
            }
            return prev.1 + (py - prev.1) * (x - prev.0) / (px - prev.0);
        }
        prev = (px, py);
    }
    let x_last = x_last as f64;
    let slope = match pts.len() {
        1 => y_last / x_last,
        n => {
            let (xa, ya) = pts[n - 2];
            (y_last - ya) / (x_last - xa as f64)
        }
    };
    y_last + slope * (x - x_last)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct CostParams {
    s: usize,
    k: usize,
}

impl CostParams {
    pub fn new(s: usize, k: usize) -> Result<Self, CostError> {
        if k < 2 || k > s {
            Err(CostError::InvalidParams { s, k })
        } else {
            Ok(CostParams { s, k })
        }
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of locals, rounded up.
    pub fn locals(&self) -> usize {
        self.s.div_ceil(self.k)
    }

    fn locals_as(&self, rounding: Rounding) -> f64 {
        match rounding {
            Rounding::Ceil => self.locals() as f64,
            Rounding::Exact => self.s as f64 / self.k as f64,
        }
    }
}

/// How the global communicator size `s/k` is taken when `k` does not
/// divide `s`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum Rounding {
    /// Whole locals, as the topology builds them.
    #[default]
    Ceil,
    /// The undivided ratio.
    Exact,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FaultCase {
    Master,
    NonMaster,
}

pub fn hier_repair_cost(p: CostParams, shrink: &ShrinkCostFn, case: FaultCase) -> f64 {
    hier_repair_cost_with(p, shrink, case, Rounding::Ceil)
}

pub fn hier_repair_cost_with(p: CostParams, shrink: &ShrinkCostFn, case: FaultCase, rounding: Rounding) -> f64 {
    let local = shrink.evaluate(p.k);
    match case {
        FaultCase::NonMaster => local,
        FaultCase::Master => {
            local + 2.0 * shrink.evaluate(p.k + 1) + shrink.evaluate_at(p.locals_as(rounding))
        }
    }
}

/// Cost with every process equally likely to fail: one in `k` is a master.
pub fn expected_repair_cost(p: CostParams, shrink: &ShrinkCostFn) -> f64 {
    expected_repair_cost_with(p, shrink, Rounding::Ceil)
}

pub fn expected_repair_cost_with(p: CostParams, shrink: &ShrinkCostFn, rounding: Rounding) -> f64 {
    let m = 1.0 / p.k as f64;
    m * hier_repair_cost_with(p, shrink, FaultCase::Master, rounding)
        + (1.0 - m) * hier_repair_cost_with(p, shrink, FaultCase::NonMaster, rounding)
}

/// `s = k(k^2 - 2) / 2`.
pub fn eq3_size(k: f64) -> f64 {
    k * (k * k - 2.0) / 2.0
}

/// `s = sqrt(2 k^2 (2 k^2 - 1) / 3)`.
pub fn eq4_size(k: f64) -> f64 {
    libm::sqrt(2.0 * k * k * (2.0 * k * k - 1.0) / 3.0)
}

/// Solves `size(k) = s` for `k >= 1`; `size` must be increasing there.
fn invert(size: fn(f64) -> f64, s: f64) -> f64 {
    let (mut lo, mut hi) = (1.0, 2.0);
    while size(hi) < s {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if size(mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn eq3_k(s: usize) -> f64 {
    invert(eq3_size, s as f64)
}

pub fn eq4_k(s: usize) -> f64 {
    invert(eq4_size, s as f64)
}

/// Local size choice for one communicator size.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OptimalK {
    /// Minimizer of the expected cost over `2..=s`; ties go to the smaller k.
    pub scan: usize,
    pub eq3: f64,
    pub eq4: f64,
}

pub fn optimal_k(s: usize, shrink: &ShrinkCostFn) -> OptimalK {
    let mut best = (f64::INFINITY, 2);
    for k in 2..=s.max(2) {
        let Ok(p) = CostParams::new(s, k) else { continue };
        let c = expected_repair_cost(p, shrink);
        if c < best.0 {
            best = (c, k);
        }
    }
    OptimalK { scan: best.1, eq3: eq3_k(s), eq4: eq4_k(s) }
}

/// Cost metric for comparing a hierarchy with a flat shrink.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Metric {
    MasterCase,
    Expected,
}

fn metric_cost(p: CostParams, shrink: &ShrinkCostFn, metric: Metric, rounding: Rounding) -> f64 {
    match metric {
        Metric::MasterCase => hier_repair_cost_with(p, shrink, FaultCase::Master, rounding),
        Metric::Expected => expected_repair_cost_with(p, shrink, rounding),
    }
}

/// Whether some `k` makes the hierarchy strictly cheaper than `S(s)`.
pub fn hierarchy_wins(s: usize, shrink: &ShrinkCostFn, metric: Metric, rounding: Rounding) -> bool {
    let flat = shrink.evaluate(s);
    (2..=s)
        .filter_map(|k| CostParams::new(s, k).ok())
        .any(|p| metric_cost(p, shrink, metric, rounding) < flat)
}

/// Smallest `s` from which the hierarchy wins for every size up to
/// `limit`. `None` if it does not win at `limit`.
pub fn break_even_size(shrink: &ShrinkCostFn, metric: Metric, rounding: Rounding, limit: usize) -> Option<usize> {
    let mut s0 = None;
    for s in (2..=limit).rev() {
        if hierarchy_wins(s, shrink, metric, rounding) {
            s0 = Some(s);
        } else {
            break;
        }
    }
    s0
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Flat,
    Hierarchical,
}

/// Hierarchical from `threshold` processes up.
pub fn choose_mode(s: usize, threshold: usize) -> Mode {
    if s >= threshold {
        Mode::Hierarchical
    } else {
        Mode::Flat
    }
}

/// One line of the cost report.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CostRow {
    pub s: usize,
    pub k: usize,
    pub cost_master: f64,
    pub cost_nonmaster: f64,
    pub cost_expected: f64,
    pub k_scan: usize,
    pub k_eq3: f64,
    pub k_eq4: f64,
}

pub fn cost_row(p: CostParams, shrink: &ShrinkCostFn) -> CostRow {
    let opt = optimal_k(p.s, shrink);
    CostRow {
        s: p.s,
        k: p.k,
        cost_master: hier_repair_cost(p, shrink, FaultCase::Master),
        cost_nonmaster: hier_repair_cost(p, shrink, FaultCase::NonMaster),
        cost_expected: expected_repair_cost(p, shrink),
        k_scan: opt.scan,
        k_eq3: opt.eq3,
        k_eq4: opt.eq4,
    }
}
