//! Deterministic world of crash-stop processes.
//!
//! Every process runs an `async` program driven by a single-threaded,
//! seeded round-robin executor. One call to [`run_deterministic`] is one
//! simulation: messages sent during step `t` are delivered at the start of
//! step `t + 1`, scheduled crashes are applied at the start of their step,
//! and a crash becomes visible to failure probes one step later.
//!
//! Besides point-to-point messages the world offers a fault-aware
//! rendezvous service ([`Ctx::rendezvous`]). It stands in for the runtime
//! consensus that backs shrink, agreement and communicator creation: it
//! completes once every listed participant has either arrived or crashed,
//! and hands every surviving participant the same outcome.

mod exec;
mod trace;
mod world;

use alloc::vec::Vec;
use core::fmt;

pub use exec::{run_deterministic, Ctx, Recv, RecvError, Rendezvous, RunOutcome, RunReport, YieldNow};
pub use trace::{Event, Trace};
pub use world::{spawn_world, RdvKey, RdvOutcome, Stats, World, TICKET_SPAN};

/// Simulation time, in scheduler rounds.
pub type Step = u64;

/// Message tag. The top bit is reserved for runtime traffic.
pub type Tag = u64;

/// Identity of a simulated process, stable for the life of a world.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Liveness of a process as seen by the world or by a failure probe.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FaultStatus {
    Alive,
    /// Crash-stop: once crashed, a process never comes back.
    Crashed(Step),
}

impl FaultStatus {
    pub fn is_alive(self) -> bool {
        matches!(self, FaultStatus::Alive)
    }
}

/// Declarative list of crash events.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultSchedule {
    entries: Vec<(ProcessId, Step)>,
}

impl FaultSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a schedule, rejecting a victim listed twice.
    pub fn new(entries: Vec<(ProcessId, Step)>) -> Result<Self, SimError> {
        let mut seen = Vec::with_capacity(entries.len());
        for &(victim, _) in &entries {
            if seen.contains(&victim) {
                return Err(SimError::DuplicateVictim(victim));
            }
            seen.push(victim);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(ProcessId, Step)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn crash_step(&self, pid: ProcessId) -> Option<Step> {
        self.entries.iter().find(|(v, _)| *v == pid).map(|&(_, s)| s)
    }

    pub fn validate(&self, size: usize) -> Result<(), SimError> {
        for &(victim, _) in &self.entries {
            if victim.index() >= size {
                return Err(SimError::VictimOutOfRange { victim, size });
            }
        }
        Ok(())
    }
}

/// A point-to-point message in flight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub src: ProcessId,
    pub dst: ProcessId,
    pub tag: Tag,
    pub payload: bytes::Bytes,
    pub enqueue_step: Step,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Delivered,
    /// The sender crashed before delivery; the message is lost with it.
    DroppedDeadSender,
    DroppedDeadReceiver,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("process {0} has crashed and cannot act")]
    UnreachableCaller(ProcessId),
    #[error("process {0} appears twice in the fault schedule")]
    DuplicateVictim(ProcessId),
    #[error("fault victim {victim} is outside a world of {size} processes")]
    VictimOutOfRange { victim: ProcessId, size: usize },
}

/// Steps charged for a rendezvous among `participants` processes: a
/// binomial gather followed by a binomial broadcast.
pub fn rendezvous_latency(participants: usize) -> Step {
    2 * ceil_log2(participants) as Step + 1
}

pub(crate) fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}
