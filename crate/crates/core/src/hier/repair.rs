//! Execution of a repair plan.
//!
//! For a lost master of local `i` the steps follow the classic procedure:
//! shrink the local, shrink its POV, shrink the global communicator, have
//! the predecessor's master notify its POV (whose other members cannot see
//! the loss) and shrink that POV, let the successor master bridge the new
//! master in, reform the global communicator, and finally reform the POVs
//! whose successor master changed. A lost non-master only shrinks its local.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use bytes::Bytes;

use super::{HierComm, HierTopology, RepairPlan};
use crate::ftcomm::{reform_keyed, CommError, Communicator, ReformError};
use crate::simnet::ProcessId;

const SLOT_GLOBAL: u64 = u64::MAX;
const TAG_NOTIFY: u32 = 0x3F_FF00;
const TAG_BRIDGE: u32 = 0x3F_FF01;
const TAG_POVINFO: u32 = 0x3F_FF02;

impl HierComm {
    /// Agrees over the whole communicator on `flag` and on the failures seen
    /// so far. Returns true when the attempt stands; otherwise repairs.
    pub(super) async fn settle(&self, flag: bool, repairs: &mut u32) -> bool {
        let (ok, crashed) = self.agree_comm.agree_detailed(flag).await;
        let topo = self.topology();
        let fresh: Vec<usize> =
            crashed.iter().filter_map(|&p| self.orig_of(p)).filter(|&r| !topo.is_dead(r)).collect();
        if ok && fresh.is_empty() {
            return true;
        }
        if fresh.is_empty() {
            // A failed attempt with nothing to repair cannot make progress.
            self.ctx().trap(String::from("hierarchical collective failed without a new fault"));
            core::future::pending::<()>().await;
        }
        self.repair(&fresh).await;
        *repairs += 1;
        false
    }

    /// Repairs the hierarchy after the loss of `failed` (original ranks).
    /// Every survivor must call it with the same set.
    pub async fn repair(&self, failed: &[usize]) -> RepairPlan {
        let prev = self.topology();
        let plan = prev.plan(failed);
        let me = self.my;
        let ctx = self.ctx();
        let i = prev.local_of(me);
        if plan.involves(&prev, me) {
            ctx.log("REPAIR", format!("gen={} cases={:?}", plan.generation, plan.cases));
        }

        if plan.shrink_locals.contains(&i) {
            let shrunk = self.local_comm().shrink().await;
            *self.local.borrow_mut() = shrunk;
        }

        for &j in &plan.shrink_povs {
            if j == i {
                let pov = self.pov.borrow().clone().expect("pov of a ring local");
                *self.pov.borrow_mut() = Some(pov.shrink().await);
            } else if prev.pov_succ(j) == Some(me) {
                let pov = self.succ_povs.borrow().get(&j).cloned().expect("successor pov");
                let shrunk = pov.shrink().await;
                self.succ_povs.borrow_mut().insert(j, shrunk);
            }
        }

        if plan.shrink_global {
            let global = self.global_comm();
            if let Some(g) = global {
                *self.global.borrow_mut() = Some(g.shrink().await);
            }
        }

        for &j in &plan.notify_povs {
            if j != i {
                continue;
            }
            let pov = self.pov.borrow().clone().expect("pov of a ring local");
            let notifier = prev.master(j).expect("active local");
            if me == notifier {
                ctx.log("NOTIFY", format!("pov={j}"));
                pov.revoke();
            } else if let Ok(r) = pov.rank_of(self.pid(notifier)) {
                // Wait for the revocation, or for the notifier's death.
                let _ = pov.recv(r, TAG_NOTIFY).await;
                ctx.log("NOTIFY", format!("pov={j} seen"));
            }
            *self.pov.borrow_mut() = Some(pov.shrink().await);
        }

        for b in &plan.bridges {
            if me == b.from {
                let pov = self.succ_povs.borrow().get(&b.local).cloned().expect("successor pov");
                if let Ok(r) = pov.rank_of(self.pid(b.to)) {
                    ctx.log_to("BRIDGE", self.pid(b.to), format!("local={}", b.local));
                    let _ = pov.send(r, TAG_BRIDGE, Bytes::copy_from_slice(&plan.generation.to_le_bytes()));
                }
            } else if me == b.to {
                let pov = self.pov.borrow().clone().expect("pov of a ring local");
                if let Ok(r) = pov.rank_of(self.pid(b.from)) {
                    let _ = pov.recv(r, TAG_BRIDGE).await;
                    ctx.log("BRIDGE", format!("local={} joined", b.local));
                }
            }
        }

        let topo_id = self.agree_comm.cid();
        if let Some(members) = &plan.reform_global {
            if members.contains(&me) {
                let base = self.global_comm().map_or(0, |g| g.epoch());
                let key = [topo_id, plan.generation, SLOT_GLOBAL];
                let g = self.reform_retrying(key, base, members).await;
                *self.global.borrow_mut() = g;
            } else {
                *self.global.borrow_mut() = None;
            }
        }

        let global = self.global_comm();
        for p in &plan.reform_povs {
            if me == p.sender {
                if let Some(g) = &global {
                    if let Ok(r) = g.rank_of(self.pid(p.succ_master)) {
                        ctx.log_to("POVINFO", self.pid(p.succ_master), format!("pov={}", p.local));
                        let _ = g.send(r, TAG_POVINFO, Bytes::copy_from_slice(&(p.local as u64).to_le_bytes()));
                    }
                }
            }
        }
        for p in &plan.reform_povs {
            if !p.members.contains(&me) {
                continue;
            }
            if me == p.succ_master {
                if let Some(g) = &global {
                    if let Ok(r) = g.rank_of(self.pid(p.sender)) {
                        let _ = g.recv(r, TAG_POVINFO).await;
                    }
                }
            }
            let base = if p.local == i {
                self.pov.borrow().as_ref().map_or(0, Communicator::epoch)
            } else {
                self.succ_povs.borrow().get(&p.local).map_or(0, Communicator::epoch)
            };
            let key = [topo_id, plan.generation, p.local as u64];
            let pov = self.reform_retrying(key, base, &p.members).await;
            if p.local == i {
                *self.pov.borrow_mut() = pov;
            } else if let Some(pov) = pov {
                self.succ_povs.borrow_mut().insert(p.local, pov);
            }
        }
        for &j in &plan.drop_povs {
            if j == i {
                *self.pov.borrow_mut() = None;
            }
        }
        let next: &HierTopology = &plan.next;
        self.succ_povs
            .borrow_mut()
            .retain(|&j, _| !next.is_retired(j) && next.pov_succ(j) == Some(me));
        *self.topo.borrow_mut() = plan.next.clone();
        self.repairs.set(self.repairs.get() + 1);
        plan
    }

    /// Reforms with `members`, dropping any that crash until it succeeds.
    async fn reform_retrying(&self, key: [u64; 3], base: u64, members: &[usize]) -> Option<Communicator> {
        let mut pids: Vec<ProcessId> = self.pids(members);
        loop {
            match reform_keyed(&self.ctx(), key, base, &pids).await {
                Ok(c) => return Some(c),
                Err(ReformError::Crashed(gone)) => pids.retain(|p| !gone.contains(p)),
                Err(ReformError::Empty) => return None,
            }
        }
    }

    /// A resilient barrier scoped to the caller's local communicator. A
    /// failure found here shrinks only that local; the rest of the
    /// hierarchy catches up at its next collective.
    pub(super) async fn local_guard(&self) -> Result<u32, CommError> {
        let mut repairs = 0;
        loop {
            let local = self.local_comm();
            let res = local.barrier_raw().await;
            let (ok, crashed) = local.agree_detailed(res.is_ok()).await;
            if ok && crashed.is_empty() {
                return Ok(repairs);
            }
            self.ctx().log("REPAIR", format!("scope=local crashed={crashed:?}"));
            *self.local.borrow_mut() = local.shrink().await;
            repairs += 1;
        }
    }
}
