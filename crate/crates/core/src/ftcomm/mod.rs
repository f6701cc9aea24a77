//! Fault-tolerant communicators over the simulated world.
//!
//! A [`Communicator`] is one process's view of an ordered group. Local
//! queries work in any state. Point-to-point works while both endpoints are
//! alive, whatever happened to other members. Tree collectives notice
//! failures only along their propagation paths, so a broadcast can succeed
//! at some ranks and fail at others; reduce, allreduce and barrier notice a
//! failure uniformly. Communicator creation refuses to run on a group with a
//! crashed member. Shrink, agree and reform tolerate crashes.

mod coll;
mod io;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::Cell;

use bytes::Bytes;

use crate::simnet::{Ctx, FaultStatus, ProcessId, RdvKey, RecvError, Tag, TICKET_SPAN};

pub use coll::{decode_i64s, encode_i64s, ReduceOp};
pub use io::Window;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ErrorCode {
    Success,
    ProcFailed,
    Revoked,
    Unsupported,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CommError {
    #[error("a peer process has failed")]
    ProcFailed,
    #[error("the communicator has been revoked")]
    Revoked,
    #[error("operation not supported")]
    Unsupported,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

impl CommError {
    pub fn code(&self) -> ErrorCode {
        match self {
            CommError::ProcFailed => ErrorCode::ProcFailed,
            CommError::Revoked => ErrorCode::Revoked,
            CommError::Unsupported | CommError::InvalidArgument(_) => ErrorCode::Unsupported,
        }
    }
}

pub fn code_of<T>(r: &Result<T, CommError>) -> ErrorCode {
    match r {
        Ok(_) => ErrorCode::Success,
        Err(e) => e.code(),
    }
}

impl From<RecvError> for CommError {
    fn from(e: RecvError) -> Self {
        match e {
            RecvError::PeerCrashed => CommError::ProcFailed,
            RecvError::Revoked => CommError::Revoked,
        }
    }
}

/// Ordered list of processes without duplicates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group(Vec<ProcessId>);

impl Group {
    pub fn new(members: Vec<ProcessId>) -> Result<Self, CommError> {
        for (i, p) in members.iter().enumerate() {
            if members[..i].contains(p) {
                return Err(CommError::InvalidArgument("duplicate group member"));
            }
        }
        Ok(Group(members))
    }

    pub fn members(&self) -> &[ProcessId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// Rendezvous kinds, first word of the key.
const RDV_SHRINK: u64 = 1;
const RDV_AGREE: u64 = 2;
const RDV_DUP: u64 = 3;
const RDV_SPLIT: u64 = 4;
const RDV_CREATE: u64 = 5;
const RDV_REFORM: u64 = 6;

const CID_MASK: u64 = (1 << 33) - 1;
const SEQ_MASK: u64 = (1 << 26) - 1;
const SUB_USER: u64 = 15;

struct Inner {
    ctx: Ctx,
    cid: u64,
    epoch: u64,
    members: Vec<ProcessId>,
    rank: usize,
    coll_seq: Cell<u64>,
    rdv_seq: Cell<u64>,
}

/// One process's handle on a communicator. Clones share sequence counters.
#[derive(Clone)]
pub struct Communicator {
    inner: Rc<Inner>,
}

impl core::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Communicator")
            .field("cid", &self.inner.cid)
            .field("epoch", &self.inner.epoch)
            .field("members", &self.inner.members)
            .field("rank", &self.inner.rank)
            .finish()
    }
}

impl Communicator {
    /// The communicator holding every process of the world.
    pub fn world(ctx: &Ctx) -> Self {
        let members = (0..ctx.size() as u32).map(ProcessId).collect();
        Self::from_parts(ctx, 0, 0, members).expect("caller is in the world")
    }

    /// Builds the caller's view; `None` if the caller is not a member.
    pub(crate) fn from_parts(ctx: &Ctx, cid: u64, epoch: u64, members: Vec<ProcessId>) -> Option<Self> {
        let rank = members.iter().position(|&p| p == ctx.me())?;
        Some(Communicator {
            inner: Rc::new(Inner {
                ctx: ctx.clone(),
                cid,
                epoch,
                members,
                rank,
                coll_seq: Cell::new(0),
                rdv_seq: Cell::new(0),
            }),
        })
    }

    pub fn ctx(&self) -> &Ctx {
        &self.inner.ctx
    }

    pub fn cid(&self) -> u64 {
        self.inner.cid
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    pub fn members(&self) -> &[ProcessId] {
        &self.inner.members
    }

    pub fn size(&self) -> usize {
        self.inner.members.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.rank
    }

    pub fn me(&self) -> ProcessId {
        self.inner.ctx.me()
    }

    pub fn rank_of(&self, p: ProcessId) -> Result<usize, CommError> {
        self.inner
            .members
            .iter()
            .position(|&m| m == p)
            .ok_or(CommError::InvalidArgument("process is not a member"))
    }

    pub fn member(&self, rank: usize) -> Result<ProcessId, CommError> {
        self.inner.members.get(rank).copied().ok_or(CommError::InvalidArgument("rank out of range"))
    }

    pub fn is_revoked(&self) -> bool {
        self.inner.ctx.is_revoked(self.inner.cid)
    }

    /// Marks the communicator revoked everywhere. Idempotent.
    pub fn revoke(&self) {
        self.inner.ctx.revoke(self.inner.cid, &self.inner.members);
    }

    pub fn probe_rank(&self, rank: usize) -> FaultStatus {
        self.inner.ctx.probe(self.inner.members[rank])
    }

    /// Members the local failure detector currently reports as crashed.
    pub fn detected_failures(&self) -> Vec<ProcessId> {
        self.inner.members.iter().copied().filter(|&p| !self.inner.ctx.probe(p).is_alive()).collect()
    }

    pub(crate) fn has_crashed_member(&self) -> bool {
        self.inner.members.iter().any(|&p| self.inner.ctx.crashed_now(p))
    }

    pub(crate) fn tag(&self, seq: u64, sub: u64) -> Tag {
        ((self.inner.cid & CID_MASK) << 30) | ((seq & SEQ_MASK) << 4) | (sub & 0xF)
    }

    /// Reserves the next collective sequence number. Every member must
    /// consume the same numbers in the same order.
    pub fn next_seq(&self) -> u64 {
        let s = self.inner.coll_seq.get();
        self.inner.coll_seq.set(s + 1);
        s
    }

    fn next_rdv(&self) -> u64 {
        let s = self.inner.rdv_seq.get();
        self.inner.rdv_seq.set(s + 1);
        s
    }

    fn check_live(&self) -> Result<(), CommError> {
        if self.is_revoked() {
            Err(CommError::Revoked)
        } else {
            Ok(())
        }
    }

    pub fn send(&self, dst: usize, tag: u32, payload: Bytes) -> Result<(), CommError> {
        let dst = self.member(dst)?;
        self.check_live()?;
        if !self.inner.ctx.probe(dst).is_alive() {
            return Err(CommError::ProcFailed);
        }
        self.inner.ctx.send(dst, self.tag(tag as u64, SUB_USER), payload);
        Ok(())
    }

    pub async fn recv(&self, src: usize, tag: u32) -> Result<Bytes, CommError> {
        let src = self.member(src)?;
        self.check_live()?;
        Ok(self.inner.ctx.recv_in(src, self.tag(tag as u64, SUB_USER), self.inner.cid).await?)
    }

    /// Sends on a collective tag. Used by algorithms built from
    /// point-to-point steps.
    pub(crate) fn send_seq(&self, dst: usize, seq: u64, sub: u64, payload: Bytes) {
        self.inner.ctx.send(self.inner.members[dst], self.tag(seq, sub), payload);
    }

    pub(crate) async fn recv_seq(&self, src: usize, seq: u64, sub: u64) -> Result<Bytes, CommError> {
        let src = self.inner.members[src];
        Ok(self.inner.ctx.recv_in(src, self.tag(seq, sub), self.inner.cid).await?)
    }

    /// New communicator holding exactly the alive members, in order.
    pub async fn shrink(&self) -> Communicator {
        let key = RdvKey([RDV_SHRINK, self.inner.cid, self.next_rdv(), 0]);
        let out = self.inner.ctx.rendezvous(key, "shrink", &self.inner.members, Vec::new()).await;
        let members = out.survivors();
        let cid = out.ticket;
        self.inner.ctx.log(
            "SHRINK",
            format!("cid={} new={} epoch={} n={}", self.inner.cid, cid, self.inner.epoch + 1, members.len()),
        );
        Self::from_parts(&self.inner.ctx, cid, self.inner.epoch + 1, members).expect("shrink caller survives")
    }

    /// Logical AND of the flags of every surviving member.
    pub async fn agree(&self, flag: bool) -> bool {
        self.agree_detailed(flag).await.0
    }

    /// Like [`agree`](Self::agree), also returning the members found crashed
    /// when the agreement was decided. Every survivor gets the same pair.
    pub async fn agree_detailed(&self, flag: bool) -> (bool, Vec<ProcessId>) {
        let key = RdvKey([RDV_AGREE, self.inner.cid, self.next_rdv(), 0]);
        let out = self.inner.ctx.rendezvous(key, "agree", &self.inner.members, alloc::vec![flag as u64]).await;
        let value = out.contributions.iter().all(|(_, w)| w[0] == 1);
        self.inner.ctx.log("AGREE", format!("cid={} flag={} value={}", self.inner.cid, flag, value));
        (value, out.crashed.clone())
    }

    /// Duplicate with a fresh context. Refused if any member has crashed.
    pub async fn dup(&self) -> Result<Communicator, CommError> {
        self.check_live()?;
        let key = RdvKey([RDV_DUP, self.inner.cid, self.next_rdv(), 0]);
        let out = self.inner.ctx.rendezvous(key, "dup", &self.inner.members, Vec::new()).await;
        if !out.crashed.is_empty() {
            return Err(CommError::ProcFailed);
        }
        Ok(Self::from_parts(&self.inner.ctx, out.ticket, 0, self.inner.members.clone()).expect("member"))
    }

    /// Splits by `color`, ordering each part by `(key, rank)`. A `None` color
    /// takes part in the call but gets no communicator.
    pub async fn split(&self, color: Option<u32>, key: u64) -> Result<Option<Communicator>, CommError> {
        self.check_live()?;
        let words = alloc::vec![color.map_or(u64::MAX, u64::from), key];
        let rkey = RdvKey([RDV_SPLIT, self.inner.cid, self.next_rdv(), 0]);
        let out = self.inner.ctx.rendezvous(rkey, "split", &self.inner.members, words).await;
        if !out.crashed.is_empty() {
            return Err(CommError::ProcFailed);
        }
        let Some(color) = color else { return Ok(None) };
        let mut colors: Vec<u64> = out.contributions.iter().map(|(_, w)| w[0]).filter(|&c| c != u64::MAX).collect();
        colors.sort_unstable();
        colors.dedup();
        let index = colors.binary_search(&(color as u64)).expect("own color present") as u64;
        let mut part: Vec<(u64, usize, ProcessId)> = out
            .contributions
            .iter()
            .enumerate()
            .filter(|(_, (_, w))| w[0] == color as u64)
            .map(|(rank, (p, w))| (w[1], rank, *p))
            .collect();
        part.sort_unstable();
        let members = part.into_iter().map(|(_, _, p)| p).collect();
        Ok(Self::from_parts(&self.inner.ctx, cid_at(out.ticket, index + 1), 0, members))
    }

    /// Creates one communicator per group in a single collective call over
    /// this communicator. Returns the caller's handle for each group (or
    /// `None` where the caller is not a member). Refused if any member has
    /// crashed.
    pub async fn create_groups(&self, groups: &[Vec<ProcessId>]) -> Result<Vec<Option<Communicator>>, CommError> {
        self.check_live()?;
        if groups.len() as u64 >= TICKET_SPAN {
            return Err(CommError::InvalidArgument("too many groups in one call"));
        }
        let key = RdvKey([RDV_CREATE, self.inner.cid, self.next_rdv(), 0]);
        let out = self.inner.ctx.rendezvous(key, "create", &self.inner.members, Vec::new()).await;
        if !out.crashed.is_empty() {
            return Err(CommError::ProcFailed);
        }
        Ok(groups
            .iter()
            .enumerate()
            .map(|(i, g)| Self::from_parts(&self.inner.ctx, cid_at(out.ticket, i as u64 + 1), 0, g.clone()))
            .collect())
    }

    /// Fresh communicator with the given ordered membership and the next
    /// epoch. Every member of `new_members` must call it; they need not
    /// belong to this communicator. Fails with `ProcFailed` if a listed
    /// member crashed; retry with that member excluded.
    pub async fn reform(&self, new_members: &Group) -> Result<Communicator, CommError> {
        reform_keyed(&self.inner.ctx, [0, self.inner.cid, self.inner.epoch], self.inner.epoch, new_members.members())
            .await
            .map_err(|e| match e {
                ReformError::Crashed(_) => CommError::ProcFailed,
                ReformError::Empty => CommError::InvalidArgument("empty group"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReformError {
    Empty,
    /// Listed members found crashed; none of the survivors got a communicator.
    Crashed(Vec<ProcessId>),
}

/// Reform under a caller-chosen key prefix. The membership fingerprint
/// completes the key, so a retry with a reduced list never collides with
/// the failed attempt. The new epoch is one past the largest `base_epoch`
/// contributed.
pub async fn reform_keyed(
    ctx: &Ctx,
    prefix: [u64; 3],
    base_epoch: u64,
    members: &[ProcessId],
) -> Result<Communicator, ReformError> {
    if members.is_empty() {
        return Err(ReformError::Empty);
    }
    let key = RdvKey([RDV_REFORM | (prefix[0] << 8), prefix[1], prefix[2], fingerprint(members)]);
    let out = ctx.rendezvous(key, "reform", members, alloc::vec![base_epoch]).await;
    if !out.crashed.is_empty() {
        return Err(ReformError::Crashed(out.crashed.clone()));
    }
    let epoch = out.contributions.iter().map(|(_, w)| w[0]).max().unwrap_or(base_epoch) + 1;
    ctx.log("REFORM", format!("new={} epoch={} n={}", out.ticket, epoch, members.len()));
    Ok(Communicator::from_parts(ctx, out.ticket, epoch, members.to_vec()).expect("reform caller listed"))
}

fn cid_at(ticket: u64, index: u64) -> u64 {
    ticket + index
}

pub fn fingerprint(members: &[ProcessId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in members {
        h ^= p.0 as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ members.len() as u64
}

#[cfg(test)]
mod tests;
