//! The replicated description of a hierarchical communicator.
//!
//! Ranks here are original ranks of the wrapped communicator. Rank `r`
//! belongs to local `r / k` for good. The master of a local is its lowest
//! surviving member. Active (non-empty) locals form a ring; the POV of
//! local `i` is its members plus the master of its successor.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("local size k must be at least 2, got {0}")]
    LocalSizeTooSmall(usize),
    #[error("a topology needs at least one process")]
    Empty,
}

/// Which repair a crashed process calls for.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RepairCase {
    MasterFault(usize),
    NonMasterFault(usize),
}

impl RepairCase {
    pub fn local(self) -> usize {
        match self {
            RepairCase::MasterFault(i) | RepairCase::NonMasterFault(i) => i,
        }
    }

    pub fn is_master(self) -> bool {
        matches!(self, RepairCase::MasterFault(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierTopology {
    k: usize,
    size: usize,
    locals: Vec<Vec<usize>>,
    dead: BTreeSet<usize>,
    /// Successor master currently included in each POV, as the POV
    /// communicators actually stand. `None` for retired locals and for a
    /// POV that lost its successor master and awaits a reform.
    pov_succ: Vec<Option<usize>>,
    generation: u64,
}

impl HierTopology {
    pub fn new(size: usize, k: usize) -> Result<Self, TopologyError> {
        Self::with_dead(size, k, &[])
    }

    /// Topology over `size` ranks where `dead` are already gone.
    pub fn with_dead(size: usize, k: usize, dead: &[usize]) -> Result<Self, TopologyError> {
        if k < 2 {
            return Err(TopologyError::LocalSizeTooSmall(k));
        }
        if size == 0 {
            return Err(TopologyError::Empty);
        }
        let dead: BTreeSet<usize> = dead.iter().copied().filter(|&r| r < size).collect();
        let locals: Vec<Vec<usize>> = (0..size.div_ceil(k))
            .map(|i| (i * k..((i + 1) * k).min(size)).filter(|r| !dead.contains(r)).collect())
            .collect();
        let mut t = HierTopology { k, size, pov_succ: alloc::vec![None; locals.len()], locals, dead, generation: 0 };
        t.pov_succ = (0..t.locals.len()).map(|i| t.desired_pov_succ(i)).collect();
        Ok(t)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Bumped by every repair.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_locals(&self) -> usize {
        self.locals.len()
    }

    pub fn local_of(&self, r: usize) -> usize {
        r / self.k
    }

    pub fn local(&self, i: usize) -> &[usize] {
        &self.locals[i]
    }

    pub fn is_retired(&self, i: usize) -> bool {
        self.locals[i].is_empty()
    }

    pub fn active_locals(&self) -> Vec<usize> {
        (0..self.locals.len()).filter(|&i| !self.is_retired(i)).collect()
    }

    pub fn master(&self, i: usize) -> Option<usize> {
        self.locals[i].first().copied()
    }

    pub fn is_master(&self, r: usize) -> bool {
        self.master(self.local_of(r)) == Some(r)
    }

    pub fn is_dead(&self, r: usize) -> bool {
        self.dead.contains(&r)
    }

    pub fn dead(&self) -> impl Iterator<Item = usize> + '_ {
        self.dead.iter().copied()
    }

    /// Next active local after `i` on the ring; `i` itself if it is alone.
    pub fn successor(&self, i: usize) -> usize {
        let n = self.locals.len();
        (1..n).map(|d| (i + d) % n).find(|&j| !self.is_retired(j)).unwrap_or(i)
    }

    pub fn predecessor(&self, i: usize) -> usize {
        let n = self.locals.len();
        (1..n).map(|d| (i + n - d) % n).find(|&j| !self.is_retired(j)).unwrap_or(i)
    }

    fn desired_pov_succ(&self, i: usize) -> Option<usize> {
        if self.is_retired(i) {
            return None;
        }
        let s = self.successor(i);
        if s == i {
            None
        } else {
            self.master(s)
        }
    }

    /// Members of local `i` followed by its successor's master. A lone local
    /// is its own POV.
    pub fn pov(&self, i: usize) -> Vec<usize> {
        let mut members = self.locals[i].clone();
        if let Some(m) = self.desired_pov_succ(i) {
            members.push(m);
        }
        members
    }

    pub fn pov_succ(&self, i: usize) -> Option<usize> {
        self.pov_succ[i]
    }

    /// Masters of the active locals, in local order.
    pub fn global(&self) -> Vec<usize> {
        self.active_locals().into_iter().filter_map(|i| self.master(i)).collect()
    }

    pub fn classify_fault(&self, r: usize) -> RepairCase {
        let i = self.local_of(r);
        if self.master(i) == Some(r) {
            RepairCase::MasterFault(i)
        } else {
            RepairCase::NonMasterFault(i)
        }
    }

    /// Checks every structural invariant; the error names the first broken one.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (i, local) in self.locals.iter().enumerate() {
            if local.len() > self.k {
                return Err(format!("local {i} has {} members, more than k={}", local.len(), self.k));
            }
            if local.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("local {i} is not sorted"));
            }
            for &r in local {
                if self.local_of(r) != i {
                    return Err(format!("rank {r} sits in local {i} instead of {}", self.local_of(r)));
                }
                if self.dead.contains(&r) {
                    return Err(format!("dead rank {r} still in local {i}"));
                }
                if !seen.insert(r) {
                    return Err(format!("rank {r} appears twice"));
                }
            }
        }
        for r in 0..self.size {
            if !self.dead.contains(&r) && !seen.contains(&r) {
                return Err(format!("live rank {r} is in no local"));
            }
        }
        for i in self.active_locals() {
            let m = self.master(i).expect("active local");
            if self.locals[i].iter().any(|&r| r < m) {
                return Err(format!("master {m} of local {i} is not the lowest member"));
            }
            if self.pov_succ[i] != self.desired_pov_succ(i) {
                return Err(format!(
                    "pov {i} holds successor master {:?}, expected {:?}",
                    self.pov_succ[i],
                    self.desired_pov_succ(i)
                ));
            }
        }
        Ok(())
    }

    /// Derives the repair for the newly failed ranks `failed`. Every
    /// survivor computes the same plan from the same replica and set.
    pub fn plan(&self, failed: &[usize]) -> RepairPlan {
        let mut new_dead: Vec<usize> =
            failed.iter().copied().filter(|r| *r < self.size && !self.dead.contains(r)).collect();
        new_dead.sort_unstable();
        new_dead.dedup();

        let mut next = self.clone();
        for &r in &new_dead {
            next.dead.insert(r);
            let i = self.local_of(r);
            next.locals[i].retain(|&x| x != r);
        }
        let cases: Vec<RepairCase> = new_dead.iter().map(|&r| self.classify_fault(r)).collect();
        let mut faulted: Vec<usize> = cases.iter().map(|c| c.local()).collect();
        faulted.sort_unstable();
        faulted.dedup();
        let mastered: Vec<usize> = faulted
            .iter()
            .copied()
            .filter(|&i| cases.contains(&RepairCase::MasterFault(i)))
            .collect();
        let ring = self.active_locals().len() > 1;
        let gone = |r: usize| next.dead.contains(&r);

        let shrink_locals: Vec<usize> = faulted.iter().copied().filter(|&i| !next.is_retired(i)).collect();
        let shrink_povs: Vec<usize> = if ring {
            mastered.iter().copied().filter(|&i| !next.is_retired(i)).collect()
        } else {
            Vec::new()
        };
        let shrink_global = !mastered.is_empty();
        let notify_povs: Vec<usize> = if ring {
            let mut v: Vec<usize> = mastered
                .iter()
                .map(|&i| self.predecessor(i))
                .filter(|&j| !mastered.contains(&j) && !next.is_retired(j))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        } else {
            Vec::new()
        };
        let bridges: Vec<Bridge> = shrink_povs
            .iter()
            .filter_map(|&i| {
                let from = self.pov_succ[i].filter(|&s| !gone(s))?;
                Some(Bridge { local: i, from, to: next.master(i).expect("survivors") })
            })
            .collect();
        let reform_global =
            mastered.iter().any(|&i| !next.is_retired(i)).then(|| next.global());

        for &i in &shrink_povs {
            next.pov_succ[i] = self.pov_succ[i].filter(|&s| !gone(s));
        }
        for &j in &notify_povs {
            next.pov_succ[j] = None;
        }
        for i in 0..next.locals.len() {
            if next.is_retired(i) {
                next.pov_succ[i] = None;
            }
        }
        let mut reform_povs = Vec::new();
        let mut drop_povs = Vec::new();
        for j in next.active_locals() {
            let want = next.desired_pov_succ(j);
            if want == next.pov_succ[j] {
                continue;
            }
            match want {
                Some(succ_master) => reform_povs.push(PovReform {
                    local: j,
                    members: next.pov(j),
                    sender: next.master(j).expect("active"),
                    succ_master,
                }),
                None => drop_povs.push(j),
            }
            next.pov_succ[j] = want;
        }
        next.generation += 1;
        RepairPlan {
            generation: self.generation,
            new_dead,
            cases,
            shrink_locals,
            shrink_povs,
            shrink_global,
            notify_povs,
            bridges,
            reform_global,
            reform_povs,
            drop_povs,
            next,
        }
    }
}

/// The successor master handing a new master its way into the global
/// communicator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bridge {
    pub local: usize,
    pub from: usize,
    pub to: usize,
}

/// A POV rebuilt to include a new successor master.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PovReform {
    pub local: usize,
    pub members: Vec<usize>,
    /// Master of the local, who tells the new successor master.
    pub sender: usize,
    pub succ_master: usize,
}

/// Ordered repair steps. Every step lists only what changes; processes
/// outside a step's communicators skip it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepairPlan {
    /// Generation of the topology being repaired.
    pub generation: u64,
    pub new_dead: Vec<usize>,
    pub cases: Vec<RepairCase>,
    /// Locals losing a member, shrunk first.
    pub shrink_locals: Vec<usize>,
    /// POVs of locals that lost their master.
    pub shrink_povs: Vec<usize>,
    pub shrink_global: bool,
    /// POVs whose members learn of a master loss through a notification
    /// from their own master, then shrink.
    pub notify_povs: Vec<usize>,
    pub bridges: Vec<Bridge>,
    /// New global membership, when a new master has to join.
    pub reform_global: Option<Vec<usize>>,
    pub reform_povs: Vec<PovReform>,
    /// POVs that collapse because a single local is left.
    pub drop_povs: Vec<usize>,
    pub next: HierTopology,
}

impl RepairPlan {
    /// Whether rank `r` takes part in any step of the plan.
    pub fn involves(&self, prev: &HierTopology, r: usize) -> bool {
        let i = prev.local_of(r);
        let in_pov = |j: usize| prev.local_of(r) == j || prev.pov_succ(j) == Some(r);
        self.shrink_locals.contains(&i)
            || self.shrink_povs.iter().any(|&j| in_pov(j))
            || (self.shrink_global && prev.is_master(r))
            || self.notify_povs.contains(&i)
            || self.bridges.iter().any(|b| b.from == r || b.to == r)
            || self.reform_global.as_ref().is_some_and(|g| g.contains(&r))
            || self.reform_povs.iter().any(|p| p.members.contains(&r) || p.sender == r)
    }
}
