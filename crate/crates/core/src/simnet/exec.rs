use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::future::Future;
use core::pin::Pin;
use core::task::{Context, Poll, Waker};

use bytes::Bytes;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::Trace;
use super::world::{Halt, RdvKey, RdvOutcome, State, Stats, World, RUNTIME_BIT};
use super::{FaultStatus, ProcessId, Step, Tag};

/// Handle a process program uses to talk to the world.
#[derive(Clone)]
pub struct Ctx {
    state: Rc<RefCell<State>>,
    me: ProcessId,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RecvError {
    /// The source crashed and the crash has become visible.
    PeerCrashed,
    /// The receive context was revoked at the receiver.
    Revoked,
}

impl Ctx {
    pub fn me(&self) -> ProcessId {
        self.me
    }

    pub fn size(&self) -> usize {
        self.state.borrow().size
    }

    pub fn now(&self) -> Step {
        self.state.borrow().step
    }

    /// World-wide counters so far.
    pub fn stats(&self) -> Stats {
        self.state.borrow().stats
    }

    pub fn seed(&self) -> u64 {
        self.state.borrow().seed
    }

    /// Sends never block and never fail: a message to a dead process is
    /// silently dropped at delivery.
    pub fn send(&self, dst: ProcessId, tag: Tag, payload: Bytes) {
        self.state.borrow_mut().send(self.me, dst, tag & !RUNTIME_BIT, payload);
    }

    pub fn recv(&self, src: ProcessId, tag: Tag) -> Recv {
        Recv { state: self.state.clone(), me: self.me, src, tag, context: None }
    }

    /// A receive that also fails once `context` is revoked here.
    pub fn recv_in(&self, src: ProcessId, tag: Tag, context: u64) -> Recv {
        Recv { state: self.state.clone(), me: self.me, src, tag, context: Some(context) }
    }

    pub fn probe(&self, target: ProcessId) -> FaultStatus {
        self.state.borrow().detect(target)
    }

    /// World truth, without detector delay. Only the trap model of file and
    /// window operations may look at it.
    pub(crate) fn crashed_now(&self, target: ProcessId) -> bool {
        self.state.borrow().is_crashed(target)
    }

    pub fn is_revoked(&self, context: u64) -> bool {
        self.state.borrow().is_revoked(self.me, context)
    }

    /// Revokes `context` here and floods the notice to `members`.
    pub fn revoke(&self, context: u64, members: &[ProcessId]) {
        self.state.borrow_mut().revoke(self.me, context, members);
    }

    pub fn rendezvous(
        &self,
        key: RdvKey,
        label: &'static str,
        participants: &[ProcessId],
        words: Vec<u64>,
    ) -> Rendezvous {
        Rendezvous {
            state: self.state.clone(),
            me: self.me,
            key,
            pending: Some((label, participants.to_vec(), words)),
        }
    }

    pub fn yield_now(&self) -> YieldNow {
        YieldNow { state: self.state.clone(), yielded: false }
    }

    /// Appends a trace event attributed to this process.
    pub fn log(&self, kind: &'static str, detail: String) {
        self.state.borrow_mut().log(kind, Some(self.me), None, None, detail);
    }

    pub fn log_to(&self, kind: &'static str, dst: ProcessId, detail: String) {
        self.state.borrow_mut().log(kind, Some(self.me), Some(dst), None, detail);
    }

    /// Halts the whole world, as a job abort does.
    pub fn abort(&self) {
        let mut st = self.state.borrow_mut();
        if st.halted.is_none() {
            let step = st.step;
            st.log("ABORT", Some(self.me), None, None, String::new());
            st.halted = Some(Halt::Abort { by: self.me, step });
        }
    }

    /// Halts the whole world with an unrecoverable runtime error.
    pub fn trap(&self, reason: String) {
        let mut st = self.state.borrow_mut();
        if st.halted.is_none() {
            let step = st.step;
            st.log("TRAP", Some(self.me), None, None, reason.clone());
            st.halted = Some(Halt::Trap { by: self.me, step, reason });
        }
    }

    pub fn store_write(&self, name: &str, offset: usize, data: &[u8]) {
        let mut st = self.state.borrow_mut();
        let file = st.store.entry(String::from(name)).or_default();
        if file.len() < offset + data.len() {
            file.resize(offset + data.len(), 0);
        }
        file[offset..offset + data.len()].copy_from_slice(data);
    }

    pub fn store_len(&self, name: &str) -> Option<usize> {
        self.state.borrow().store.get(name).map(Vec::len)
    }

    pub fn store_read(&self, name: &str, offset: usize, len: usize) -> Vec<u8> {
        let st = self.state.borrow();
        let mut out = alloc::vec![0u8; len];
        if let Some(file) = st.store.get(name) {
            let end = file.len().min(offset + len);
            if offset < end {
                out[..end - offset].copy_from_slice(&file[offset..end]);
            }
        }
        out
    }
}

pub struct Recv {
    state: Rc<RefCell<State>>,
    me: ProcessId,
    src: ProcessId,
    tag: Tag,
    context: Option<u64>,
}

impl Future for Recv {
    type Output = Result<Bytes, RecvError>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        let mut st = this.state.borrow_mut();
        if let Some(c) = this.context {
            if st.is_revoked(this.me, c) {
                st.progress = true;
                return Poll::Ready(Err(RecvError::Revoked));
            }
        }
        if let Some(b) = st.take_mail(this.me, this.src, this.tag) {
            st.progress = true;
            return Poll::Ready(Ok(b));
        }
        if !st.detect(this.src).is_alive() {
            st.progress = true;
            return Poll::Ready(Err(RecvError::PeerCrashed));
        }
        Poll::Pending
    }
}

pub struct Rendezvous {
    state: Rc<RefCell<State>>,
    me: ProcessId,
    key: RdvKey,
    pending: Option<(&'static str, Vec<ProcessId>, Vec<u64>)>,
}

impl Future for Rendezvous {
    type Output = Rc<RdvOutcome>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        let mut st = this.state.borrow_mut();
        if let Some((label, participants, words)) = this.pending.take() {
            st.rdv_arrive(this.key, label, &participants, this.me, words);
            return Poll::Pending;
        }
        match st.rdv_poll(&this.key, this.me) {
            Some(o) => Poll::Ready(o),
            None => Poll::Pending,
        }
    }
}

pub struct YieldNow {
    state: Rc<RefCell<State>>,
    yielded: bool,
}

impl Future for YieldNow {
    type Output = ();

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        let this = self.get_mut();
        if this.yielded {
            Poll::Ready(())
        } else {
            this.yielded = true;
            this.state.borrow_mut().progress = true;
            Poll::Pending
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    /// Every surviving process finished its program.
    Completed,
    Aborted { by: ProcessId, step: Step },
    Trapped { by: ProcessId, step: Step, reason: String },
    /// No process can make progress and no event is pending.
    Deadlock { blocked: Vec<ProcessId>, step: Step },
    StepLimit { step: Step },
}

pub struct RunReport<T> {
    /// Program result per process; `None` for crashed or halted ones.
    pub outputs: Vec<Option<T>>,
    pub outcome: RunOutcome,
    pub trace: Trace,
    pub final_step: Step,
    pub stats: Stats,
    /// Contents of the shared byte store at the end of the run.
    pub store: BTreeMap<String, Vec<u8>>,
    /// Step at which each process finished, if it did.
    pub finished_at: Vec<Option<Step>>,
}

impl<T> RunReport<T> {
    pub fn completed(&self) -> bool {
        self.outcome == RunOutcome::Completed
    }
}

type Task<T> = Pin<Box<dyn Future<Output = T>>>;

/// Runs one program instance per process until all survivors finish, the
/// world halts, or nothing can progress. Identical inputs give identical
/// traces.
pub fn run_deterministic<T, F, Fut>(world: World, mut program: F) -> RunReport<T>
where
    F: FnMut(Ctx) -> Fut,
    Fut: Future<Output = T> + 'static,
    T: 'static,
{
    let n = world.state.size;
    let mut rng = ChaCha8Rng::seed_from_u64(world.state.seed);
    let state = Rc::new(RefCell::new(world.state));
    let mut tasks: Vec<Option<Task<T>>> = (0..n)
        .map(|i| {
            let ctx = Ctx { state: state.clone(), me: ProcessId(i as u32) };
            Some(Box::pin(program(ctx)) as Task<T>)
        })
        .collect();
    let mut outputs: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let mut finished_at: Vec<Option<Step>> = alloc::vec![None; n];
    let mut cx = Context::from_waker(Waker::noop());

    let outcome = loop {
        {
            let mut st = state.borrow_mut();
            st.progress = false;
            for p in st.apply_crashes() {
                tasks[p.index()] = None;
            }
            st.deliver_all();
        }
        let start = (rng.next_u64() % n as u64) as usize;
        for off in 0..n {
            let i = (start + off) % n;
            let Some(task) = tasks[i].as_mut() else { continue };
            if let Poll::Ready(v) = task.as_mut().poll(&mut cx) {
                let mut st = state.borrow_mut();
                st.progress = true;
                st.log("TERM", Some(ProcessId(i as u32)), None, None, String::new());
                finished_at[i] = Some(st.step);
                drop(st);
                outputs[i] = Some(v);
                tasks[i] = None;
            }
            if state.borrow().halted.is_some() {
                break;
            }
        }
        let mut st = state.borrow_mut();
        if let Some(h) = st.halted.clone() {
            break match h {
                Halt::Abort { by, step } => RunOutcome::Aborted { by, step },
                Halt::Trap { by, step, reason } => RunOutcome::Trapped { by, step, reason },
            };
        }
        st.complete_rendezvous();
        if tasks.iter().all(Option::is_none) {
            break RunOutcome::Completed;
        }
        let now = st.step;
        if st.progress || !st.in_flight.is_empty() {
            st.step = now + 1;
        } else {
            // Nothing moved: skip to the next timed event, or report deadlock.
            // A crash only becomes visible one step after it happens.
            let next = [st.next_crash_after(now), st.next_release_after(now)]
                .into_iter()
                .flatten()
                .min();
            match next {
                Some(at) => st.step = at.max(now + 1),
                None => {
                    let blocked = (0..n)
                        .filter(|&i| tasks[i].is_some())
                        .map(|i| ProcessId(i as u32))
                        .collect();
                    break RunOutcome::Deadlock { blocked, step: now };
                }
            }
        }
        if st.step > st.max_steps {
            break RunOutcome::StepLimit { step: st.step };
        }
    };

    drop(tasks);
    let st = Rc::try_unwrap(state).ok().expect("world state still shared").into_inner();
    RunReport {
        outputs,
        outcome,
        final_step: st.step,
        trace: st.trace,
        stats: st.stats,
        store: st.store,
        finished_at,
    }
}
