//! Hierarchical resilient communicators.
//!
//! The wrapped communicator is cut into locals of at most `k` ranks. The
//! lowest surviving rank of each local is its master, and the masters form
//! the global communicator. Each local also has a POV (its members plus
//! the next local's master), used only to repair the loss of a master.
//! Collectives travel through locals and the global communicator, so a
//! non-master failure is repaired inside one local.

mod ops;
mod repair;
mod topology;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use crate::flat::{CollectiveOutcome, OutcomeCode, Policy, ResilientComm};
use crate::ftcomm::{CommError, Communicator};
use crate::simnet::{Ctx, ProcessId, Step, Trace};

pub use topology::{Bridge, HierTopology, PovReform, RepairCase, RepairPlan, TopologyError};

/// Operations a communicator can be asked to perform.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Opcode {
    Bcast,
    Scatter,
    Reduce,
    Gather,
    Allreduce,
    Barrier,
    Send,
    Recv,
    Split,
    Dup,
    FileWrite,
    FileRead,
    Rank,
    Size,
    Group,
    WinCreate,
    WinPut,
    WinGet,
    WinFence,
}

/// Data-movement shape of an operation.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OperationClass {
    OneToOne,
    OneToAll,
    AllToOne,
    AllToAll,
    CommCreator,
    FileOp,
    LocalOnly,
}

/// Routing class of `op`. One-sided operations are not supported by the
/// hierarchical mode.
pub fn classify(op: Opcode) -> Result<OperationClass, CommError> {
    use Opcode::*;
    Ok(match op {
        Bcast | Scatter => OperationClass::OneToAll,
        Reduce | Gather => OperationClass::AllToOne,
        Allreduce | Barrier => OperationClass::AllToAll,
        Send | Recv => OperationClass::OneToOne,
        Split | Dup => OperationClass::CommCreator,
        FileWrite | FileRead => OperationClass::FileOp,
        Rank | Size | Group => OperationClass::LocalOnly,
        WinCreate | WinPut | WinGet | WinFence => return Err(CommError::Unsupported),
    })
}

/// Trace kinds that count as repair work.
pub const REPAIR_KINDS: [&str; 6] = ["REPAIR", "SHRINK", "REFORM", "NOTIFY", "BRIDGE", "POVINFO"];

/// Who took part in a repair and how long it took, read off a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepairReport {
    pub participants: Vec<ProcessId>,
    /// Span from the first to the last repair event.
    pub steps: Step,
    pub events: usize,
}

impl RepairReport {
    pub fn from_trace(trace: &Trace) -> Self {
        Self::from_trace_window(trace, 0, Step::MAX)
    }

    /// Repair events with `from <= step <= to`.
    pub fn from_trace_window(trace: &Trace, from: Step, to: Step) -> Self {
        let events: Vec<_> = trace
            .events()
            .iter()
            .filter(|e| e.step >= from && e.step <= to && REPAIR_KINDS.contains(&e.kind))
            .collect();
        let mut participants: Vec<ProcessId> = events.iter().filter_map(|e| e.src).collect();
        participants.sort_unstable();
        participants.dedup();
        let steps = match (events.iter().map(|e| e.step).min(), events.iter().map(|e| e.step).max()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        };
        RepairReport { participants, steps, events: events.len() }
    }
}

pub struct HierComm {
    flat: ResilientComm,
    agree_comm: Communicator,
    topo: RefCell<HierTopology>,
    my: usize,
    local: RefCell<Communicator>,
    pov: RefCell<Option<Communicator>>,
    /// POVs this process belongs to as successor master, by local index.
    succ_povs: RefCell<BTreeMap<usize, Communicator>>,
    global: RefCell<Option<Communicator>>,
    repairs: Cell<u64>,
}

impl HierComm {
    /// Builds the hierarchy over `flat`, with locals of at most `k` ranks.
    /// Ranks `flat` already knows to be failed start out dead.
    pub async fn build(flat: ResilientComm, k: usize) -> Result<HierComm, CommError> {
        let size = flat.size();
        HierTopology::new(size, k).map_err(|_| CommError::InvalidArgument("local size must be at least 2"))?;
        let layout = |rc: &ResilientComm| {
            let dead: Vec<usize> = (0..size).filter(|r| !rc.active_ranks().contains(r)).collect();
            let topo = HierTopology::with_dead(size, k, &dead).expect("validated");
            Layout::of(&topo, rc.originals())
        };
        let handles = flat.create_groups(&|rc| layout(rc).groups).await;
        let layout = layout(&flat);
        let topo = layout.topo.clone();
        let my = flat.rank();
        let i = topo.local_of(my);
        let take = |idx: usize| handles[idx].clone().expect("member of own group");
        let pov = layout.pov_slot[i].map(take);
        let mut succ_povs = BTreeMap::new();
        for j in topo.active_locals() {
            if topo.pov_succ(j) == Some(my) {
                succ_povs.insert(j, take(layout.pov_slot[j].expect("pov exists")));
            }
        }
        let global = topo.is_master(my).then(|| take(layout.global_slot));
        Ok(HierComm {
            agree_comm: take(0),
            local: RefCell::new(take(layout.local_slot[i])),
            topo: RefCell::new(topo),
            my,
            pov: RefCell::new(pov),
            succ_povs: RefCell::new(succ_povs),
            global: RefCell::new(global),
            repairs: Cell::new(0),
            flat,
        })
    }

    pub fn rank(&self) -> usize {
        self.my
    }

    pub fn size(&self) -> usize {
        self.flat.size()
    }

    pub fn policy(&self) -> Policy {
        self.flat.policy()
    }

    pub fn ctx(&self) -> Ctx {
        self.agree_comm.ctx().clone()
    }

    pub fn topology(&self) -> HierTopology {
        self.topo.borrow().clone()
    }

    pub fn flat(&self) -> &ResilientComm {
        &self.flat
    }

    /// Rank within the caller's local communicator.
    pub fn local_rank(&self) -> usize {
        self.local.borrow().rank()
    }

    pub fn local_comm(&self) -> Communicator {
        self.local.borrow().clone()
    }

    pub fn global_comm(&self) -> Option<Communicator> {
        self.global.borrow().clone()
    }

    pub fn pov_comm(&self) -> Option<Communicator> {
        self.pov.borrow().clone()
    }

    pub fn total_repairs(&self) -> u64 {
        self.repairs.get()
    }

    fn pid(&self, r: usize) -> ProcessId {
        self.flat.originals()[r]
    }

    fn pids(&self, ranks: &[usize]) -> Vec<ProcessId> {
        ranks.iter().map(|&r| self.pid(r)).collect()
    }

    fn orig_of(&self, p: ProcessId) -> Option<usize> {
        self.flat.originals().iter().position(|&q| q == p)
    }

    fn on_critical(&self, repairs: u32, what: &str) -> CollectiveOutcome {
        match self.flat.policy() {
            Policy::Skip => {
                self.ctx().log("SKIP", String::from(what));
                CollectiveOutcome { code: OutcomeCode::Skipped, repairs }
            }
            Policy::Abort => {
                self.ctx().abort();
                CollectiveOutcome { code: OutcomeCode::Aborted, repairs }
            }
        }
    }

    /// Compares this process's communicators with the replica. Lazily kept
    /// dead members of a POV are tolerated.
    pub fn verify(&self) -> Result<(), String> {
        let topo = self.topo.borrow();
        topo.check_invariants()?;
        let i = topo.local_of(self.my);
        let local = self.local.borrow();
        if local.members() != self.pids(topo.local(i)).as_slice() {
            return Err(format!("local {i} is {:?}, replica says {:?}", local.members(), topo.local(i)));
        }
        let global = self.global.borrow();
        match (&*global, topo.is_master(self.my)) {
            (Some(g), true) if g.members() == self.pids(&topo.global()).as_slice() => {}
            (None, false) => {}
            (g, m) => return Err(format!("global {:?} for master={m}, replica says {:?}", g, topo.global())),
        }
        let check_pov = |j: usize, c: Option<&Communicator>| -> Result<(), String> {
            let want = self.pids(&topo.pov(j));
            match (c, topo.pov_succ(j)) {
                (None, None) => Ok(()),
                (Some(c), Some(s)) => {
                    let extra_ok = c.members().iter().all(|p| {
                        want.contains(p) || self.orig_of(*p).is_some_and(|r| topo.is_dead(r))
                    });
                    let has_all = want.iter().all(|p| c.members().contains(p));
                    if extra_ok && has_all && c.members().last() == Some(&self.pid(s)) {
                        Ok(())
                    } else {
                        Err(format!("pov {j} is {:?}, replica says {:?}", c.members(), want))
                    }
                }
                (c, s) => Err(format!("pov {j} handle {:?} with successor {:?}", c.map(|c| c.members()), s)),
            }
        };
        check_pov(i, self.pov.borrow().as_ref())?;
        let succ = self.succ_povs.borrow();
        for j in topo.active_locals() {
            let mine = topo.pov_succ(j) == Some(self.my);
            match (mine, succ.get(&j)) {
                (true, Some(c)) => check_pov(j, Some(c))?,
                (false, None) => {}
                _ => return Err(format!("successor handle for pov {j} out of sync")),
            }
        }
        Ok(())
    }
}

/// Where each communicator sits in the list handed to group creation.
struct Layout {
    topo: HierTopology,
    groups: Vec<Vec<ProcessId>>,
    local_slot: Vec<usize>,
    pov_slot: Vec<Option<usize>>,
    global_slot: usize,
}

impl Layout {
    fn of(topo: &HierTopology, originals: &[ProcessId]) -> Layout {
        let pids = |rs: &[usize]| rs.iter().map(|&r| originals[r]).collect::<Vec<_>>();
        let live: Vec<usize> = (0..topo.size()).filter(|&r| !topo.is_dead(r)).collect();
        let mut groups = alloc::vec![pids(&live)];
        let mut local_slot = alloc::vec![usize::MAX; topo.num_locals()];
        let mut pov_slot = alloc::vec![None; topo.num_locals()];
        for i in topo.active_locals() {
            local_slot[i] = groups.len();
            groups.push(pids(topo.local(i)));
        }
        for i in topo.active_locals() {
            if topo.pov_succ(i).is_some() {
                pov_slot[i] = Some(groups.len());
                groups.push(pids(&topo.pov(i)));
            }
        }
        let global_slot = groups.len();
        groups.push(pids(&topo.global()));
        Layout { topo: topo.clone(), groups, local_slot, pov_slot, global_slot }
    }
}
