//! Flat resilient communicators.
//!
//! A [`ResilientComm`] stands in for an application communicator. The
//! application keeps addressing processes by their original ranks; the
//! layer maps them onto a substitute communicator that is shrunk whenever a
//! collective reveals a failure. After each collective attempt the
//! survivors agree on whether everyone succeeded; if not, they shrink and
//! retry. Operations whose root or peer has failed are skipped or abort the
//! run, depending on the policy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};

use bytes::Bytes;

use crate::ftcomm::{decode_i64s, encode_i64s, CommError, Communicator, ReduceOp, Window};
use crate::simnet::ProcessId;

/// What to do when an operation depends on a failed process.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Policy {
    Abort,
    Skip,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OutcomeCode {
    Success,
    Skipped,
    Aborted,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct CollectiveOutcome {
    pub code: OutcomeCode,
    /// Shrink rounds performed by this call.
    pub repairs: u32,
}

impl CollectiveOutcome {
    pub fn success(repairs: u32) -> Self {
        CollectiveOutcome { code: OutcomeCode::Success, repairs }
    }

    pub fn is_success(&self) -> bool {
        self.code == OutcomeCode::Success
    }
}

/// Where an original rank lives now.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Translated {
    Rank(usize),
    Failed,
}

const SUB_GATHER: u64 = 2;
const SUB_SCATTER: u64 = 3;

pub struct ResilientComm {
    originals: Vec<ProcessId>,
    my_orig: usize,
    rank_map: RefCell<Vec<Option<usize>>>,
    substitute: RefCell<Communicator>,
    policy: Policy,
    repairs: Cell<u64>,
}

impl ResilientComm {
    /// Wraps `c`, substituting a duplicate. Fails if `c` is faulty.
    pub async fn wrap(c: &Communicator, policy: Policy) -> Result<Self, CommError> {
        let dup = c.dup().await?;
        Ok(Self::from_substitute(dup, policy))
    }

    /// Wraps a communicator the caller already owns exclusively.
    pub fn from_substitute(c: Communicator, policy: Policy) -> Self {
        ResilientComm {
            originals: c.members().to_vec(),
            my_orig: c.rank(),
            rank_map: RefCell::new((0..c.size()).map(Some).collect()),
            substitute: RefCell::new(c),
            policy,
            repairs: Cell::new(0),
        }
    }

    /// Application-visible rank. Constant for the life of the communicator.
    pub fn rank(&self) -> usize {
        self.my_orig
    }

    pub fn size(&self) -> usize {
        self.originals.len()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn originals(&self) -> &[ProcessId] {
        &self.originals
    }

    pub fn substitute(&self) -> Ref<'_, Communicator> {
        self.substitute.borrow()
    }

    pub fn sub(&self) -> Communicator {
        self.substitute.borrow().clone()
    }

    /// Total shrink rounds since wrapping.
    pub fn total_repairs(&self) -> u64 {
        self.repairs.get()
    }

    pub fn rank_map(&self) -> Vec<Option<usize>> {
        self.rank_map.borrow().clone()
    }

    pub fn translate(&self, orig: usize) -> Result<Translated, CommError> {
        match self.rank_map.borrow().get(orig) {
            None => Err(CommError::InvalidArgument("original rank out of range")),
            Some(Some(r)) => Ok(Translated::Rank(*r)),
            Some(None) => Ok(Translated::Failed),
        }
    }

    /// Original ranks not yet known to have failed.
    pub fn active_ranks(&self) -> Vec<usize> {
        self.rank_map.borrow().iter().enumerate().filter(|(_, r)| r.is_some()).map(|(i, _)| i).collect()
    }

    fn check_rank(&self, orig: usize) -> Result<(), CommError> {
        if orig < self.size() {
            Ok(())
        } else {
            Err(CommError::InvalidArgument("original rank out of range"))
        }
    }

    fn current(&self, orig: usize) -> Option<usize> {
        self.rank_map.borrow()[orig]
    }

    /// Applies the policy for a failed critical process.
    fn on_critical(&self, repairs: u32, what: &str) -> CollectiveOutcome {
        let ctx = self.substitute.borrow().ctx().clone();
        match self.policy {
            Policy::Skip => {
                ctx.log("SKIP", String::from(what));
                CollectiveOutcome { code: OutcomeCode::Skipped, repairs }
            }
            Policy::Abort => {
                ctx.abort();
                CollectiveOutcome { code: OutcomeCode::Aborted, repairs }
            }
        }
    }

    /// Replaces the substitute and refreshes the rank map.
    pub(crate) fn install(&self, sub: Communicator) {
        let mut map = self.rank_map.borrow_mut();
        for (i, p) in self.originals.iter().enumerate() {
            map[i] = sub.rank_of(*p).ok();
        }
        *self.substitute.borrow_mut() = sub;
    }

    /// Agrees on `ok`; on a negative outcome shrinks the substitute.
    /// Returns true when the attempt stands.
    async fn settle(&self, ok: bool, repairs: &mut u32) -> bool {
        let sub = self.sub();
        // Like the runtime agreement it models, a crashed member that has
        // not been shrunk away yet counts as a failure even if every
        // survivor saw its own part succeed.
        let (agreed, crashed) = sub.agree_detailed(ok).await;
        if agreed && crashed.is_empty() {
            return true;
        }
        sub.ctx().log("REPAIR", format!("scope=flat crashed={}", crashed.len()));
        let shrunk = sub.shrink().await;
        self.install(shrunk);
        self.repairs.set(self.repairs.get() + 1);
        *repairs += 1;
        false
    }

    /// Broadcast from original rank `root`. Non-roots receive into `buf`
    /// only on success.
    pub async fn bcast(&self, root: usize, buf: &mut Vec<u8>) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let mut repairs = 0;
        loop {
            let Some(r) = self.current(root) else {
                return Ok(self.on_critical(repairs, "bcast"));
            };
            let sub = self.sub();
            let payload = (self.my_orig == root).then(|| Bytes::copy_from_slice(buf));
            let res = sub.bcast_raw(r, payload).await;
            if self.settle(res.is_ok(), &mut repairs).await {
                if self.my_orig != root {
                    *buf = res.expect("agreed success").to_vec();
                }
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    /// Reduction to original rank `root`, written to `out` at the root.
    pub async fn reduce(
        &self,
        root: usize,
        values: &[i64],
        op: ReduceOp,
        out: &mut Vec<i64>,
    ) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let mut repairs = 0;
        loop {
            let Some(r) = self.current(root) else {
                return Ok(self.on_critical(repairs, "reduce"));
            };
            let res = self.sub().reduce_raw(r, values, op).await;
            if self.settle(res.is_ok(), &mut repairs).await {
                if let Some(v) = res.expect("agreed success") {
                    *out = v;
                }
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    /// Reduction with a byte-level combiner. Only used by layers that
    /// build on this one.
    pub async fn allreduce_bytes(
        &self,
        value: Bytes,
        combine: &dyn Fn(&[u8], &[u8]) -> Vec<u8>,
        out: &mut Bytes,
    ) -> CollectiveOutcome {
        let mut repairs = 0;
        loop {
            let res = self.sub().reduce_framed(0, Some(value.clone()), combine, true).await;
            if self.settle(res.is_ok(), &mut repairs).await {
                *out = res.expect("agreed success").expect("shared result");
                return CollectiveOutcome::success(repairs);
            }
        }
    }

    pub async fn allreduce(&self, values: &[i64], op: ReduceOp, out: &mut Vec<i64>) -> CollectiveOutcome {
        let mut b = Bytes::new();
        let outcome = self.allreduce_bytes(encode_i64s(values), &|a, b| op.combine_bytes(a, b), &mut b).await;
        if outcome.is_success() {
            *out = decode_i64s(&b);
        }
        outcome
    }

    pub async fn barrier(&self) -> CollectiveOutcome {
        let mut repairs = 0;
        loop {
            let res = self.sub().barrier_raw().await;
            if self.settle(res.is_ok(), &mut repairs).await {
                return CollectiveOutcome::success(repairs);
            }
        }
    }

    /// Gather by point-to-point transfers addressed by original rank. The
    /// root's `recv` holds one `block.len()` slot per original rank; slots
    /// of failed ranks keep whatever the root put there.
    pub async fn gather(&self, root: usize, block: &[u8], recv: &mut [u8]) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let bs = block.len();
        if self.my_orig == root && recv.len() != bs * self.size() {
            return Err(CommError::InvalidArgument("gather buffer size"));
        }
        let initial = recv.to_vec();
        let mut repairs = 0;
        loop {
            let Some(r) = self.current(root) else {
                return Ok(self.on_critical(repairs, "gather"));
            };
            let sub = self.sub();
            let seq = sub.next_seq();
            let mut work = initial.clone();
            let mut ok = true;
            if self.my_orig == root {
                work[root * bs..(root + 1) * bs].copy_from_slice(block);
                for i in self.active_ranks() {
                    if i == root {
                        continue;
                    }
                    let src = self.current(i).expect("active");
                    match sub.recv_seq(src, seq, SUB_GATHER).await {
                        Ok(b) if b.len() == bs => work[i * bs..(i + 1) * bs].copy_from_slice(&b),
                        _ => ok = false,
                    }
                }
            } else {
                sub.send_seq(r, seq, SUB_GATHER, Bytes::copy_from_slice(block));
            }
            if self.settle(ok, &mut repairs).await {
                if self.my_orig == root {
                    recv.copy_from_slice(&work);
                }
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    /// Scatter of equal slots from original rank `root`; slot `i` goes to
    /// original rank `i` only.
    pub async fn scatter(&self, root: usize, send: &[u8], recv: &mut [u8]) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let bs = recv.len();
        if self.my_orig == root && send.len() != bs * self.size() {
            return Err(CommError::InvalidArgument("scatter buffer size"));
        }
        let mut repairs = 0;
        loop {
            let Some(r) = self.current(root) else {
                return Ok(self.on_critical(repairs, "scatter"));
            };
            let sub = self.sub();
            let seq = sub.next_seq();
            let mut mine = None;
            let mut ok = true;
            if self.my_orig == root {
                for i in self.active_ranks() {
                    let slot = &send[i * bs..(i + 1) * bs];
                    if i == root {
                        mine = Some(Bytes::copy_from_slice(slot));
                    } else {
                        sub.send_seq(self.current(i).expect("active"), seq, SUB_SCATTER, Bytes::copy_from_slice(slot));
                    }
                }
            } else {
                match sub.recv_seq(r, seq, SUB_SCATTER).await {
                    Ok(b) if b.len() == bs => mine = Some(b),
                    _ => ok = false,
                }
            }
            if self.settle(ok, &mut repairs).await {
                recv.copy_from_slice(&mine.expect("agreed success"));
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    /// Point-to-point send. No repair is attempted: a failure only marks
    /// the peer for the next collective.
    pub fn send(&self, dst: usize, tag: u32, payload: Bytes) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(dst)?;
        let Some(r) = self.current(dst) else {
            return Ok(self.on_critical(0, "send"));
        };
        match self.sub().send(r, tag, payload) {
            Ok(()) => Ok(CollectiveOutcome::success(0)),
            Err(CommError::ProcFailed) => Ok(self.on_critical(0, "send")),
            Err(e) => Err(e),
        }
    }

    pub async fn recv(&self, src: usize, tag: u32, buf: &mut Vec<u8>) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(src)?;
        let Some(r) = self.current(src) else {
            return Ok(self.on_critical(0, "recv"));
        };
        match self.sub().recv(r, tag).await {
            Ok(b) => {
                *buf = b.to_vec();
                Ok(CollectiveOutcome::success(0))
            }
            Err(CommError::ProcFailed) => Ok(self.on_critical(0, "recv")),
            Err(e) => Err(e),
        }
    }

    /// Barrier-guarded collective file write of `data` at `offset`.
    pub async fn file_write(&self, name: &str, offset: usize, data: &[u8]) -> Result<CollectiveOutcome, CommError> {
        let guard = self.barrier().await;
        self.sub().file_write_at_all(name, offset, data).await?;
        Ok(guard)
    }

    pub async fn file_read(&self, name: &str, offset: usize, len: usize, out: &mut Vec<u8>) -> Result<CollectiveOutcome, CommError> {
        let guard = self.barrier().await;
        *out = self.sub().file_read_at_all(name, offset, len).await?;
        Ok(guard)
    }

    /// Barrier-guarded window creation.
    pub async fn win_create(&self, name: &str, size: usize) -> Result<CollectiveOutcome, CommError> {
        let guard = self.barrier().await;
        self.sub().win_create(name, size).await?;
        Ok(guard)
    }

    /// One guarded access epoch on window `name`: a resilient barrier, the
    /// optional put, then a resilient fence. Every rank calls it; a rank
    /// whose target has failed skips its put but still joins the fence.
    pub async fn win_put(
        &self,
        name: &str,
        size: usize,
        put: Option<(usize, usize, &[u8])>,
    ) -> Result<CollectiveOutcome, CommError> {
        let mut outcome = self.barrier().await;
        if let Some((target, offset, data)) = put {
            self.check_rank(target)?;
            match self.current(target) {
                None => {
                    let o = self.on_critical(outcome.repairs, "win_put");
                    if o.code == OutcomeCode::Aborted {
                        return Ok(o);
                    }
                    outcome = o;
                }
                Some(r) => Window::attach(&self.sub(), name, size).put(r, offset, data).await?,
            }
        }
        let fence = self.barrier().await;
        outcome.repairs += fence.repairs;
        Ok(outcome)
    }

    /// Guarded read of `len` bytes at `offset` from `target`'s region.
    pub async fn win_get(
        &self,
        name: &str,
        size: usize,
        get: Option<(usize, usize, usize)>,
        out: &mut Vec<u8>,
    ) -> Result<CollectiveOutcome, CommError> {
        let mut outcome = self.barrier().await;
        if let Some((target, offset, len)) = get {
            self.check_rank(target)?;
            match self.current(target) {
                None => {
                    let o = self.on_critical(outcome.repairs, "win_get");
                    if o.code == OutcomeCode::Aborted {
                        return Ok(o);
                    }
                    outcome = o;
                }
                Some(r) => *out = Window::attach(&self.sub(), name, size).get(r, offset, len).await?,
            }
        }
        let fence = self.barrier().await;
        outcome.repairs += fence.repairs;
        Ok(outcome)
    }

    /// The caller's own region of window `name`.
    pub fn win_local(&self, name: &str, size: usize) -> Vec<u8> {
        Window::attach(&self.sub(), name, size).local()
    }

    /// Resilient duplicate. The result is a fresh resilient communicator
    /// whose original ranks are the survivors at creation.
    pub async fn dup(&self) -> Result<ResilientComm, CollectiveOutcome> {
        let mut repairs = 0;
        loop {
            let res = self.sub().dup().await;
            if self.settle(res.is_ok(), &mut repairs).await {
                return Ok(Self::from_substitute(res.expect("agreed success"), self.policy));
            }
        }
    }

    /// Resilient split by color and key. `None` color yields `None`.
    pub async fn split(&self, color: Option<u32>, key: u64) -> Option<ResilientComm> {
        let mut repairs = 0;
        loop {
            let res = self.sub().split(color, key).await;
            if self.settle(res.is_ok(), &mut repairs).await {
                return res.expect("agreed success").map(|c| Self::from_substitute(c, self.policy));
            }
        }
    }

    /// Creates several communicators at once over the substitute, retrying
    /// until no member fails during creation.
    pub async fn create_groups(&self, groups: &dyn Fn(&ResilientComm) -> Vec<Vec<ProcessId>>) -> Vec<Option<Communicator>> {
        let mut repairs = 0;
        loop {
            let wanted = groups(self);
            let res = self.sub().create_groups(&wanted).await;
            if self.settle(res.is_ok(), &mut repairs).await {
                return res.expect("agreed success");
            }
        }
    }
}
