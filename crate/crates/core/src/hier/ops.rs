//! Collectives routed through locals and the global communicator.
//!
//! Every attempt runs all of its phases, whatever happened earlier, so
//! that sequence numbers stay aligned; a failed phase hands a failure
//! frame onwards. The attempt is then settled by one agreement over the
//! whole communicator.

use alloc::format;
use alloc::vec::Vec;

use bytes::{BufMut, Bytes, BytesMut};

use super::{HierComm, HierTopology};
use crate::flat::{CollectiveOutcome, OutcomeCode, ResilientComm};
use crate::ftcomm::{decode_i64s, encode_i64s, CommError, Communicator, ReduceOp};

type Combine<'a> = &'a dyn Fn(&[u8], &[u8]) -> Vec<u8>;

fn concat(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl HierComm {
    fn check_rank(&self, r: usize) -> Result<(), CommError> {
        if r < self.size() {
            Ok(())
        } else {
            Err(CommError::InvalidArgument("original rank out of range"))
        }
    }

    fn rank_in(&self, comm: &Communicator, r: Option<usize>) -> Option<usize> {
        comm.rank_of(self.pid(r?)).ok()
    }

    fn phase(&self, what: &str, n: u8) {
        self.ctx().log("PHASE", format!("{what}:{n}"));
    }

    /// Moves `payload` from `root` to everyone. Returns what this process
    /// received, or `None` if any phase it saw failed.
    async fn one_to_all(&self, topo: &HierTopology, root: usize, payload: Option<Bytes>, what: &str) -> Option<Bytes> {
        let i_root = topo.local_of(root);
        let mine = topo.local_of(self.my);
        let local = self.local_comm();
        let mut v = None;
        if mine == i_root {
            self.phase(what, 1);
            if let Some(r) = self.rank_in(&local, Some(root)) {
                v = local.bcast_framed(r, payload).await.ok();
            }
        }
        if let Some(g) = self.global_comm() {
            self.phase(what, 2);
            let got = match self.rank_in(&g, topo.master(i_root)) {
                Some(r) => g.bcast_framed(r, if mine == i_root { v.clone() } else { None }).await.ok(),
                None => None,
            };
            if mine != i_root {
                v = got;
            } else if got.is_none() {
                v = None;
            }
        }
        if mine != i_root {
            self.phase(what, 3);
            let master = topo.master(mine);
            v = match self.rank_in(&local, master) {
                Some(r) => {
                    let input = if master == Some(self.my) { v } else { None };
                    local.bcast_framed(r, input).await.ok()
                }
                None => None,
            };
        }
        v
    }

    /// Combines everyone's `value` towards `root`. `Some(result)` on
    /// success, where the result is only set at the root; with `hop` off
    /// the result stays at the master of the root's local instead.
    async fn all_to_one(
        &self,
        topo: &HierTopology,
        root: usize,
        value: Bytes,
        combine: Combine<'_>,
        hop: bool,
        what: &str,
    ) -> Option<Option<Bytes>> {
        let i_root = topo.local_of(root);
        let mine = topo.local_of(self.my);
        let local = self.local_comm();
        let mut ok = true;
        self.phase(what, 1);
        let mut acc = match self.rank_in(&local, topo.master(mine)) {
            Some(r) => match local.reduce_framed(r, Some(value), combine, false).await {
                Ok(a) => a,
                Err(_) => {
                    ok = false;
                    None
                }
            },
            None => {
                ok = false;
                None
            }
        };
        if let Some(g) = self.global_comm() {
            self.phase(what, 2);
            acc = match self.rank_in(&g, topo.master(i_root)) {
                Some(r) => match g.reduce_framed(r, acc, combine, false).await {
                    Ok(a) => a,
                    Err(_) => {
                        ok = false;
                        None
                    }
                },
                None => {
                    ok = false;
                    None
                }
            };
        }
        if hop && mine == i_root {
            self.phase(what, 3);
            let from = self.rank_in(&local, topo.master(i_root));
            let to = self.rank_in(&local, Some(root));
            acc = match (from, to) {
                (Some(f), Some(t)) => match local.hop_framed(f, t, acc).await {
                    Ok(a) => a,
                    Err(_) => {
                        ok = false;
                        None
                    }
                },
                _ => {
                    ok = false;
                    None
                }
            };
        }
        ok.then_some(acc)
    }

    /// Combine to the first master, then broadcast from it.
    async fn all_to_all(&self, topo: &HierTopology, value: Bytes, combine: Combine<'_>, what: &str) -> Option<Bytes> {
        let hub = topo.global().first().copied().expect("a live process");
        let reduced = self.all_to_one(topo, hub, value, combine, false, what).await;
        let reduced_ok = reduced.is_some();
        let payload = match reduced {
            Some(Some(v)) if self.my == hub => Some(v),
            _ => None,
        };
        let out = self.one_to_all(topo, hub, payload, what).await;
        if reduced_ok {
            out
        } else {
            None
        }
    }

    /// Applies the failure policy when `root` is gone, or `None` to go on.
    fn root_gone(&self, root: usize, repairs: u32, what: &str) -> Option<CollectiveOutcome> {
        self.topo.borrow().is_dead(root).then(|| self.on_critical(repairs, what))
    }

    /// Broadcast from original rank `root`. Non-roots receive into `buf`
    /// only on success.
    pub async fn bcast(&self, root: usize, buf: &mut Vec<u8>) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let mut repairs = 0;
        loop {
            if let Some(o) = self.root_gone(root, repairs, "bcast") {
                return Ok(o);
            }
            let topo = self.topology();
            let payload = (self.my == root).then(|| Bytes::copy_from_slice(buf));
            let res = self.one_to_all(&topo, root, payload, "bcast").await;
            if self.settle(res.is_some(), &mut repairs).await {
                *buf = res.expect("agreed success").to_vec();
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    /// Scatter of equal slots from `root`: slot `i` of `send` ends up in
    /// `recv` at original rank `i`.
    pub async fn scatter(&self, root: usize, send: &[u8], recv: &mut [u8]) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let bs = recv.len();
        if self.my == root && send.len() != bs * self.size() {
            return Err(CommError::InvalidArgument("scatter buffer size"));
        }
        let mut repairs = 0;
        loop {
            if let Some(o) = self.root_gone(root, repairs, "scatter") {
                return Ok(o);
            }
            let topo = self.topology();
            let payload = (self.my == root).then(|| Bytes::copy_from_slice(send));
            let res = self.one_to_all(&topo, root, payload, "scatter").await;
            let ok = res.as_ref().is_some_and(|b| b.len() == bs * self.size());
            if self.settle(ok, &mut repairs).await {
                let all = res.expect("agreed success");
                recv.copy_from_slice(&all[self.my * bs..(self.my + 1) * bs]);
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

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
            if let Some(o) = self.root_gone(root, repairs, "reduce") {
                return Ok(o);
            }
            let topo = self.topology();
            let combine = |a: &[u8], b: &[u8]| op.combine_bytes(a, b);
            let res = self.all_to_one(&topo, root, encode_i64s(values), &combine, true, "reduce").await;
            if self.settle(res.is_some(), &mut repairs).await {
                if let Some(v) = res.flatten() {
                    *out = decode_i64s(&v);
                }
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    /// Gather of equal blocks to `root`, one slot per original rank. Slots
    /// of failed ranks keep what the root had there.
    pub async fn gather(&self, root: usize, block: &[u8], recv: &mut [u8]) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(root)?;
        let bs = block.len();
        if self.my == root && recv.len() != bs * self.size() {
            return Err(CommError::InvalidArgument("gather buffer size"));
        }
        let mut entry = BytesMut::with_capacity(bs + 4);
        entry.put_u32_le(self.my as u32);
        entry.put_slice(block);
        let entry = entry.freeze();
        let mut repairs = 0;
        loop {
            if let Some(o) = self.root_gone(root, repairs, "gather") {
                return Ok(o);
            }
            let topo = self.topology();
            let res = self.all_to_one(&topo, root, entry.clone(), &concat, true, "gather").await;
            if self.settle(res.is_some(), &mut repairs).await {
                if let Some(all) = res.flatten() {
                    for e in all.chunks_exact(bs + 4) {
                        let r = u32::from_le_bytes(e[..4].try_into().expect("rank prefix")) as usize;
                        recv[r * bs..(r + 1) * bs].copy_from_slice(&e[4..]);
                    }
                }
                return Ok(CollectiveOutcome::success(repairs));
            }
        }
    }

    pub async fn allreduce(&self, values: &[i64], op: ReduceOp, out: &mut Vec<i64>) -> CollectiveOutcome {
        let mut repairs = 0;
        loop {
            let topo = self.topology();
            let combine = |a: &[u8], b: &[u8]| op.combine_bytes(a, b);
            let res = self.all_to_all(&topo, encode_i64s(values), &combine, "allreduce").await;
            if self.settle(res.is_some(), &mut repairs).await {
                *out = decode_i64s(&res.expect("agreed success"));
                return CollectiveOutcome::success(repairs);
            }
        }
    }

    pub async fn barrier(&self) -> CollectiveOutcome {
        let mut repairs = 0;
        loop {
            let topo = self.topology();
            let res = self.all_to_all(&topo, Bytes::new(), &concat, "barrier").await;
            if self.settle(res.is_some(), &mut repairs).await {
                return CollectiveOutcome::success(repairs);
            }
        }
    }

    /// Point-to-point send. A peer the replica knows to be dead triggers
    /// the policy; nothing is repaired here.
    pub fn send(&self, dst: usize, tag: u32, payload: Bytes) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(dst)?;
        if self.topo.borrow().is_dead(dst) {
            return Ok(self.on_critical(0, "send"));
        }
        self.flat.send(dst, tag, payload)
    }

    pub async fn recv(&self, src: usize, tag: u32, buf: &mut Vec<u8>) -> Result<CollectiveOutcome, CommError> {
        self.check_rank(src)?;
        if self.topo.borrow().is_dead(src) {
            return Ok(self.on_critical(0, "recv"));
        }
        self.flat.recv(src, tag, buf).await
    }

    /// Collective file write guarded within the caller's local only.
    pub async fn file_write(&self, name: &str, offset: usize, data: &[u8]) -> Result<CollectiveOutcome, CommError> {
        let repairs = self.local_guard().await?;
        self.local_comm().file_write_at_all(name, offset, data).await?;
        Ok(CollectiveOutcome::success(repairs))
    }

    pub async fn file_read(&self, name: &str, offset: usize, len: usize, out: &mut Vec<u8>) -> Result<CollectiveOutcome, CommError> {
        let repairs = self.local_guard().await?;
        *out = self.local_comm().file_read_at_all(name, offset, len).await?;
        Ok(CollectiveOutcome::success(repairs))
    }

    /// Duplicates the communicator and builds a fresh hierarchy on it.
    pub async fn dup(&self) -> Result<HierComm, CollectiveOutcome> {
        let flat = self.flat.dup().await?;
        let k = self.topo.borrow().k();
        HierComm::build(flat, k)
            .await
            .map_err(|_| CollectiveOutcome { code: OutcomeCode::Aborted, repairs: 0 })
    }

    pub async fn split(&self, color: Option<u32>, key: u64) -> Option<HierComm> {
        let flat: ResilientComm = self.flat.split(color, key).await?;
        let k = self.topo.borrow().k();
        HierComm::build(flat, k).await.ok()
    }

    /// One-sided operations are not available in this mode.
    pub async fn win_create(&self, _name: &str, _size: usize) -> Result<CollectiveOutcome, CommError> {
        Err(CommError::Unsupported)
    }
}
