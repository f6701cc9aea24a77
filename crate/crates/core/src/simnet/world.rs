use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use bytes::Bytes;

use super::trace::{Event, Trace};
use super::{
    rendezvous_latency, DeliveryOutcome, FaultSchedule, FaultStatus, Message, ProcessId, SimError,
    Step, Tag,
};

/// Tags with this bit set carry runtime traffic (revocation notices).
pub(crate) const RUNTIME_BIT: Tag = 1 << 63;

/// Rendezvous tickets are multiples of this; the low bits are free for the
/// caller to derive several identifiers from one ticket.
pub const TICKET_SPAN: u64 = 1 << 12;

/// Key of a rendezvous. Callers pick a layout; the world only compares keys.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RdvKey(pub [u64; 4]);

/// What every surviving participant of a rendezvous receives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RdvOutcome {
    /// World-unique multiple of [`TICKET_SPAN`].
    pub ticket: u64,
    pub label: &'static str,
    /// Contributions of participants alive at decision, in participant order.
    pub contributions: Vec<(ProcessId, Vec<u64>)>,
    /// Participants found crashed at decision.
    pub crashed: Vec<ProcessId>,
    pub decided_at: Step,
    pub released_at: Step,
    /// Earliest arrival step among the contributors.
    pub first_arrival: Step,
}

impl RdvOutcome {
    pub fn survivors(&self) -> Vec<ProcessId> {
        self.contributions.iter().map(|(p, _)| *p).collect()
    }
}

#[derive(Debug)]
struct PendingRdv {
    participants: Vec<ProcessId>,
    label: &'static str,
    arrivals: BTreeMap<ProcessId, (Vec<u64>, Step)>,
    outcome: Option<Rc<RdvOutcome>>,
    collected: BTreeSet<ProcessId>,
}

/// Counters kept by the world regardless of tracing.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub rendezvous: u64,
    /// Messages charged to rendezvous under the binomial cost model.
    pub rendezvous_messages: u64,
}

impl Stats {
    /// Delivered point-to-point messages plus charged rendezvous messages.
    pub fn messages(&self) -> u64 {
        self.delivered + self.rendezvous_messages
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Halt {
    Abort { by: ProcessId, step: Step },
    Trap { by: ProcessId, step: Step, reason: String },
}

pub(crate) struct State {
    pub(crate) size: usize,
    pub(crate) seed: u64,
    pub(crate) step: Step,
    pub(crate) status: Vec<FaultStatus>,
    pub(crate) crash_at: Vec<Option<Step>>,
    pub(crate) in_flight: VecDeque<Message>,
    mailboxes: Vec<BTreeMap<(ProcessId, Tag), VecDeque<Bytes>>>,
    revoked: BTreeSet<(ProcessId, u64)>,
    rendezvous: BTreeMap<RdvKey, PendingRdv>,
    next_ticket: u64,
    pub(crate) trace: Trace,
    pub(crate) record: bool,
    pub(crate) stats: Stats,
    pub(crate) progress: bool,
    pub(crate) halted: Option<Halt>,
    pub(crate) store: BTreeMap<String, Vec<u8>>,
    pub(crate) max_steps: Step,
}

impl State {
    pub(crate) fn log(
        &mut self,
        kind: &'static str,
        src: Option<ProcessId>,
        dst: Option<ProcessId>,
        tag: Option<Tag>,
        detail: String,
    ) {
        if self.record {
            self.trace.push(Event { step: self.step, kind, src, dst, tag, detail });
        }
    }

    pub(crate) fn is_crashed(&self, pid: ProcessId) -> bool {
        !self.status[pid.index()].is_alive()
    }

    /// Perfect detector: a crash at step `c` is visible from step `c + 1`.
    pub(crate) fn detect(&self, target: ProcessId) -> FaultStatus {
        match self.status[target.index()] {
            FaultStatus::Crashed(c) if c < self.step => FaultStatus::Crashed(c),
            _ => FaultStatus::Alive,
        }
    }

    pub(crate) fn apply_crashes(&mut self) -> Vec<ProcessId> {
        let mut crashed = Vec::new();
        for i in 0..self.size {
            if let Some(at) = self.crash_at[i] {
                if at <= self.step && self.status[i].is_alive() {
                    self.status[i] = FaultStatus::Crashed(at);
                    crashed.push(ProcessId(i as u32));
                }
            }
        }
        for &p in &crashed {
            self.log("CRASH", Some(p), None, None, String::new());
            self.progress = true;
        }
        crashed
    }

    pub(crate) fn next_crash_after(&self, step: Step) -> Option<Step> {
        (0..self.size)
            .filter(|&i| self.status[i].is_alive())
            .filter_map(|i| self.crash_at[i])
            .filter(|&at| at > step)
            .min()
    }

    pub(crate) fn send(&mut self, src: ProcessId, dst: ProcessId, tag: Tag, payload: Bytes) {
        self.stats.sent += 1;
        if self.record && tag & RUNTIME_BIT == 0 {
            let detail = format!("len={}", payload.len());
            self.log("SEND", Some(src), Some(dst), Some(tag), detail);
        }
        self.in_flight.push_back(Message { src, dst, tag, payload, enqueue_step: self.step });
        self.progress = true;
    }

    pub(crate) fn deliver(&mut self, msg: Message) -> DeliveryOutcome {
        let outcome = if self.is_crashed(msg.src) {
            DeliveryOutcome::DroppedDeadSender
        } else if self.is_crashed(msg.dst) {
            DeliveryOutcome::DroppedDeadReceiver
        } else {
            DeliveryOutcome::Delivered
        };
        self.progress = true;
        let kind = match outcome {
            DeliveryOutcome::Delivered => "DELIVER",
            DeliveryOutcome::DroppedDeadSender => "DROP_SENDER",
            DeliveryOutcome::DroppedDeadReceiver => "DROP_RECEIVER",
        };
        if msg.tag & RUNTIME_BIT == 0 {
            self.log(kind, Some(msg.src), Some(msg.dst), Some(msg.tag), String::new());
        }
        match outcome {
            DeliveryOutcome::Delivered => {
                self.stats.delivered += 1;
                if msg.tag & RUNTIME_BIT != 0 {
                    self.on_revoke_notice(msg);
                } else {
                    self.mailboxes[msg.dst.index()]
                        .entry((msg.src, msg.tag))
                        .or_default()
                        .push_back(msg.payload);
                }
            }
            _ => self.stats.dropped += 1,
        }
        outcome
    }

    pub(crate) fn deliver_all(&mut self) {
        let batch = core::mem::take(&mut self.in_flight);
        for msg in batch {
            self.deliver(msg);
        }
    }

    pub(crate) fn take_mail(&mut self, dst: ProcessId, src: ProcessId, tag: Tag) -> Option<Bytes> {
        let boxes = &mut self.mailboxes[dst.index()];
        let queue = boxes.get_mut(&(src, tag))?;
        let out = queue.pop_front();
        if queue.is_empty() {
            boxes.remove(&(src, tag));
        }
        out
    }

    pub(crate) fn is_revoked(&self, pid: ProcessId, context: u64) -> bool {
        self.revoked.contains(&(pid, context))
    }

    /// Marks `context` revoked at `pid` and floods notices to `members`.
    pub(crate) fn revoke(&mut self, pid: ProcessId, context: u64, members: &[ProcessId]) {
        if !self.revoked.insert((pid, context)) {
            return;
        }
        self.log("REVOKE", Some(pid), None, None, format!("ctx={context}"));
        self.progress = true;
        let mut payload = Vec::with_capacity(members.len() * 4);
        for m in members {
            payload.extend_from_slice(&m.0.to_le_bytes());
        }
        let payload = Bytes::from(payload);
        for &m in members {
            if m != pid {
                self.send(pid, m, RUNTIME_BIT | context, payload.clone());
            }
        }
    }

    fn on_revoke_notice(&mut self, msg: Message) {
        let context = msg.tag & !RUNTIME_BIT;
        let members: Vec<ProcessId> = msg
            .payload
            .chunks_exact(4)
            .map(|c| ProcessId(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        self.revoke(msg.dst, context, &members);
    }

    /// Registers an arrival; returns false if the process had already arrived.
    pub(crate) fn rdv_arrive(
        &mut self,
        key: RdvKey,
        label: &'static str,
        participants: &[ProcessId],
        me: ProcessId,
        words: Vec<u64>,
    ) {
        let step = self.step;
        let entry = self.rendezvous.entry(key).or_insert_with(|| PendingRdv {
            participants: participants.to_vec(),
            label,
            arrivals: BTreeMap::new(),
            outcome: None,
            collected: BTreeSet::new(),
        });
        debug_assert_eq!(entry.participants, participants, "rendezvous {key:?} participant mismatch");
        assert!(participants.contains(&me), "process {me} is not a participant of {key:?}");
        entry.arrivals.insert(me, (words, step));
        self.progress = true;
    }

    pub(crate) fn rdv_poll(&mut self, key: &RdvKey, me: ProcessId) -> Option<Rc<RdvOutcome>> {
        let now = self.step;
        let entry = self.rendezvous.get_mut(key)?;
        let outcome = entry.outcome.as_ref()?.clone();
        if outcome.released_at > now {
            return None;
        }
        entry.collected.insert(me);
        let done = outcome
            .contributions
            .iter()
            .all(|(p, _)| entry.collected.contains(p) || !self.status[p.index()].is_alive());
        if done {
            self.rendezvous.remove(key);
        }
        self.progress = true;
        Some(outcome)
    }

    /// Decides every rendezvous whose participants have all arrived or crashed.
    pub(crate) fn complete_rendezvous(&mut self) {
        let now = self.step;
        let mut decided = Vec::new();
        for (key, rdv) in self.rendezvous.iter() {
            if rdv.outcome.is_some() {
                continue;
            }
            let ready = rdv
                .participants
                .iter()
                .all(|p| rdv.arrivals.contains_key(p) || !self.status[p.index()].is_alive());
            if ready {
                decided.push(*key);
            }
        }
        for key in decided {
            let rdv = self.rendezvous.get_mut(&key).expect("pending rendezvous");
            let mut contributions = Vec::new();
            let mut crashed = Vec::new();
            let mut first_arrival = now;
            for &p in &rdv.participants {
                if !self.status[p.index()].is_alive() {
                    crashed.push(p);
                } else if let Some((words, at)) = rdv.arrivals.get(&p) {
                    contributions.push((p, words.clone()));
                    first_arrival = first_arrival.min(*at);
                }
            }
            if contributions.is_empty() {
                self.rendezvous.remove(&key);
                continue;
            }
            let n = contributions.len();
            let ticket = self.next_ticket;
            self.next_ticket += TICKET_SPAN;
            self.stats.rendezvous += 1;
            self.stats.rendezvous_messages += 2 * (n as u64 - 1);
            rdv.outcome = Some(Rc::new(RdvOutcome {
                ticket,
                label: rdv.label,
                contributions,
                crashed,
                decided_at: now,
                released_at: now + rendezvous_latency(n),
                first_arrival,
            }));
            self.progress = true;
        }
    }

    pub(crate) fn next_release_after(&self, step: Step) -> Option<Step> {
        self.rendezvous
            .values()
            .filter_map(|r| r.outcome.as_ref())
            .map(|o| o.released_at)
            .filter(|&at| at > step)
            .min()
    }
}

/// A simulated world before (or outside) a run.
pub struct World {
    pub(crate) state: State,
}

/// Creates a world of `n` processes, all alive at step 0, with `schedule`
/// armed.
pub fn spawn_world(n: usize, seed: u64, schedule: FaultSchedule) -> Result<World, SimError> {
    if n == 0 {
        return Err(SimError::InvalidConfig("a world needs at least one process"));
    }
    if n > u32::MAX as usize {
        return Err(SimError::InvalidConfig("too many processes"));
    }
    schedule.validate(n)?;
    let mut crash_at = alloc::vec![None; n];
    for &(victim, at) in schedule.entries() {
        crash_at[victim.index()] = Some(at);
    }
    Ok(World {
        state: State {
            size: n,
            seed,
            step: 0,
            status: alloc::vec![FaultStatus::Alive; n],
            crash_at,
            in_flight: VecDeque::new(),
            mailboxes: (0..n).map(|_| BTreeMap::new()).collect(),
            revoked: BTreeSet::new(),
            rendezvous: BTreeMap::new(),
            next_ticket: TICKET_SPAN,
            trace: Trace::default(),
            record: true,
            stats: Stats::default(),
            progress: false,
            halted: None,
            store: BTreeMap::new(),
            max_steps: 5_000_000,
        },
    })
}

impl World {
    /// Disables or enables event recording. Counters are kept either way.
    pub fn with_trace(mut self, record: bool) -> Self {
        self.state.record = record;
        self
    }

    pub fn with_max_steps(mut self, max_steps: Step) -> Self {
        self.state.max_steps = max_steps;
        self
    }

    pub fn size(&self) -> usize {
        self.state.size
    }

    pub fn step(&self) -> Step {
        self.state.step
    }

    pub fn seed(&self) -> u64 {
        self.state.seed
    }

    pub fn status(&self, pid: ProcessId) -> FaultStatus {
        self.state.status[pid.index()]
    }

    pub fn alive(&self) -> Vec<ProcessId> {
        (0..self.state.size)
            .filter(|&i| self.state.status[i].is_alive())
            .map(|i| ProcessId(i as u32))
            .collect()
    }

    /// Moves the clock forward, applying every scheduled crash up to `step`.
    pub fn advance_to(&mut self, step: Step) {
        if step > self.state.step {
            self.state.step = step;
        }
        self.state.apply_crashes();
    }

    /// Builds a message from a live sender, stamped with the current step.
    pub fn enqueue(
        &mut self,
        src: ProcessId,
        dst: ProcessId,
        tag: Tag,
        payload: Bytes,
    ) -> Result<Message, SimError> {
        self.check_pid(src)?;
        self.check_pid(dst)?;
        if self.state.is_crashed(src) {
            return Err(SimError::UnreachableCaller(src));
        }
        self.state.stats.sent += 1;
        Ok(Message { src, dst, tag: tag & !RUNTIME_BIT, payload, enqueue_step: self.state.step })
    }

    pub fn deliver(&mut self, msg: Message) -> DeliveryOutcome {
        self.state.deliver(msg)
    }

    /// Pops the oldest delivered message on channel `(src, tag)` at `dst`.
    pub fn take_mail(&mut self, dst: ProcessId, src: ProcessId, tag: Tag) -> Option<Bytes> {
        self.state.take_mail(dst, src, tag)
    }

    pub fn probe_failure(&self, observer: ProcessId, target: ProcessId) -> Result<FaultStatus, SimError> {
        self.check_pid(observer)?;
        self.check_pid(target)?;
        if self.state.is_crashed(observer) {
            return Err(SimError::UnreachableCaller(observer));
        }
        Ok(self.state.detect(target))
    }

    pub fn trace(&self) -> &Trace {
        &self.state.trace
    }

    fn check_pid(&self, pid: ProcessId) -> Result<(), SimError> {
        if pid.index() >= self.state.size {
            Err(SimError::InvalidConfig("process id outside the world"))
        } else {
            Ok(())
        }
    }
}
