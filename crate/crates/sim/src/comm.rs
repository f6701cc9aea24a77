//! One interface over the three ways of running a program: the raw
//! fault-tolerant communicator, the flat wrapper and the hierarchy.

use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use legio_core::cost::{choose_mode, Mode as CostMode};
use legio_core::flat::{CollectiveOutcome, OutcomeCode, Policy, ResilientComm};
use legio_core::ftcomm::{CommError, Communicator, ReduceOp};
use legio_core::hier::HierComm;
use legio_core::simnet::Ctx;

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    None,
    Flat,
    Hier,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Mode::None),
            "flat" => Ok(Mode::Flat),
            "hier" => Ok(Mode::Hier),
            _ => Err(format!("unknown mode `{s}` (none|flat|hier)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::None => "none",
            Mode::Flat => "flat",
            Mode::Hier => "hier",
        })
    }
}

impl Mode {
    /// Falls back to flat below the hierarchy threshold.
    pub fn resolve(self, procs: usize, threshold: usize) -> Mode {
        match (self, choose_mode(procs, threshold)) {
            (Mode::Hier, CostMode::Flat) => Mode::Flat,
            (m, _) => m,
        }
    }
}

pub fn parse_policy(s: &str) -> Result<Policy, String> {
    match s {
        "skip" => Ok(Policy::Skip),
        "abort" => Ok(Policy::Abort),
        _ => Err(format!("unknown failure policy `{s}` (skip|abort)")),
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    Skipped,
    Aborted,
    /// A raw operation reported an error.
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Skipped => "skipped",
            Status::Aborted => "aborted",
            Status::Failed => "failed",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct OpOutcome {
    pub status: Status,
    pub repairs: u32,
}

impl OpOutcome {
    fn raw<T>(r: &Result<T, CommError>) -> Self {
        let status = if r.is_ok() { Status::Success } else { Status::Failed };
        OpOutcome { status, repairs: 0 }
    }

    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }
}

impl From<CollectiveOutcome> for OpOutcome {
    fn from(o: CollectiveOutcome) -> Self {
        let status = match o.code {
            OutcomeCode::Success => Status::Success,
            OutcomeCode::Skipped => Status::Skipped,
            OutcomeCode::Aborted => Status::Aborted,
        };
        OpOutcome { status, repairs: o.repairs }
    }
}

fn lift(r: Result<CollectiveOutcome, CommError>) -> OpOutcome {
    match r {
        Ok(o) => o.into(),
        Err(_) => OpOutcome { status: Status::Failed, repairs: 0 },
    }
}

const RAW_GATHER_TAG: u32 = 0x51;
const RAW_SCATTER_TAG: u32 = 0x52;

pub enum AppComm {
    Raw(Communicator),
    Flat(ResilientComm),
    Hier(HierComm),
}

impl AppComm {
    pub async fn open(ctx: &Ctx, mode: Mode, k: usize, policy: Policy) -> Result<AppComm, CommError> {
        let world = Communicator::world(ctx);
        Ok(match mode {
            Mode::None => AppComm::Raw(world),
            Mode::Flat => AppComm::Flat(ResilientComm::wrap(&world, policy).await?),
            Mode::Hier => AppComm::Hier(HierComm::build(ResilientComm::wrap(&world, policy).await?, k).await?),
        })
    }

    pub fn rank(&self) -> usize {
        match self {
            AppComm::Raw(c) => c.rank(),
            AppComm::Flat(c) => c.rank(),
            AppComm::Hier(c) => c.rank(),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            AppComm::Raw(c) => c.size(),
            AppComm::Flat(c) => c.size(),
            AppComm::Hier(c) => c.size(),
        }
    }

    /// Original ranks this process currently counts as alive.
    pub fn live_ranks(&self) -> Vec<usize> {
        match self {
            AppComm::Raw(c) => (0..c.size()).collect(),
            AppComm::Flat(c) => c.active_ranks(),
            AppComm::Hier(c) => {
                let t = c.topology();
                (0..t.size()).filter(|&r| !t.is_dead(r)).collect()
            }
        }
    }

    pub fn ctx(&self) -> Ctx {
        match self {
            AppComm::Raw(c) => c.ctx().clone(),
            AppComm::Flat(c) => c.sub().ctx().clone(),
            AppComm::Hier(c) => c.ctx(),
        }
    }

    pub async fn bcast(&self, root: usize, buf: &mut Vec<u8>) -> OpOutcome {
        match self {
            AppComm::Raw(c) => {
                let payload = (c.rank() == root).then(|| Bytes::copy_from_slice(buf));
                let r = c.bcast_raw(root, payload).await;
                if let Ok(b) = &r {
                    *buf = b.to_vec();
                }
                OpOutcome::raw(&r)
            }
            AppComm::Flat(c) => lift(c.bcast(root, buf).await),
            AppComm::Hier(c) => lift(c.bcast(root, buf).await),
        }
    }

    pub async fn reduce(&self, root: usize, values: &[i64], op: ReduceOp, out: &mut Vec<i64>) -> OpOutcome {
        match self {
            AppComm::Raw(c) => {
                let r = c.reduce_raw(root, values, op).await;
                if let Ok(Some(v)) = &r {
                    out.clone_from(v);
                }
                OpOutcome::raw(&r)
            }
            AppComm::Flat(c) => lift(c.reduce(root, values, op, out).await),
            AppComm::Hier(c) => lift(c.reduce(root, values, op, out).await),
        }
    }

    pub async fn allreduce(&self, values: &[i64], op: ReduceOp, out: &mut Vec<i64>) -> OpOutcome {
        match self {
            AppComm::Raw(c) => {
                let r = c.allreduce_raw(values, op).await;
                if let Ok(v) = &r {
                    out.clone_from(v);
                }
                OpOutcome::raw(&r)
            }
            AppComm::Flat(c) => c.allreduce(values, op, out).await.into(),
            AppComm::Hier(c) => c.allreduce(values, op, out).await.into(),
        }
    }

    pub async fn barrier(&self) -> OpOutcome {
        match self {
            AppComm::Raw(c) => OpOutcome::raw(&c.barrier_raw().await),
            AppComm::Flat(c) => c.barrier().await.into(),
            AppComm::Hier(c) => c.barrier().await.into(),
        }
    }

    /// Gather of equal blocks to `root`; `recv` has one slot per rank.
    pub async fn gather(&self, root: usize, block: &[u8], recv: &mut [u8]) -> OpOutcome {
        match self {
            AppComm::Raw(c) => {
                let bs = block.len();
                if c.rank() != root {
                    return OpOutcome::raw(&c.send(root, RAW_GATHER_TAG, Bytes::copy_from_slice(block)));
                }
                recv[root * bs..(root + 1) * bs].copy_from_slice(block);
                let mut ok = Ok(());
                for r in (0..c.size()).filter(|&r| r != root) {
                    match c.recv(r, RAW_GATHER_TAG).await {
                        Ok(b) if b.len() == bs => recv[r * bs..(r + 1) * bs].copy_from_slice(&b),
                        Ok(_) => ok = Err(CommError::InvalidArgument("block size")),
                        Err(e) => ok = Err(e),
                    }
                }
                OpOutcome::raw(&ok)
            }
            AppComm::Flat(c) => lift(c.gather(root, block, recv).await),
            AppComm::Hier(c) => lift(c.gather(root, block, recv).await),
        }
    }

    pub async fn scatter(&self, root: usize, send: &[u8], recv: &mut [u8]) -> OpOutcome {
        match self {
            AppComm::Raw(c) => {
                let bs = recv.len();
                if c.rank() == root {
                    let mut ok = Ok(());
                    for r in 0..c.size() {
                        let slot = &send[r * bs..(r + 1) * bs];
                        if r == root {
                            recv.copy_from_slice(slot);
                        } else if let Err(e) = c.send(r, RAW_SCATTER_TAG, Bytes::copy_from_slice(slot)) {
                            ok = Err(e);
                        }
                    }
                    return OpOutcome::raw(&ok);
                }
                let r = c.recv(root, RAW_SCATTER_TAG).await;
                if let Ok(b) = &r {
                    if b.len() == bs {
                        recv.copy_from_slice(b);
                    }
                }
                OpOutcome::raw(&r)
            }
            AppComm::Flat(c) => lift(c.scatter(root, send, recv).await),
            AppComm::Hier(c) => lift(c.scatter(root, send, recv).await),
        }
    }

    pub async fn file_write(&self, name: &str, offset: usize, data: &[u8]) -> OpOutcome {
        match self {
            AppComm::Raw(c) => OpOutcome::raw(&c.file_write_at_all(name, offset, data).await),
            AppComm::Flat(c) => lift(c.file_write(name, offset, data).await),
            AppComm::Hier(c) => lift(c.file_write(name, offset, data).await),
        }
    }

    /// Element-wise sum of `values` over every surviving process.
    pub async fn sum(&self, values: &[i64], out: &mut Vec<i64>) -> OpOutcome {
        self.allreduce(values, ReduceOp::Sum, out).await
    }
}
