//! Binomial-tree collectives.
//!
//! Trees are rooted at `root` over virtual ranks `v = (rank - root) mod n`.
//! The parent of `v` is `v` minus its highest set bit; the children of `v`
//! are `v + 2^j` for every `2^j > v` below `n`. For `n = 8`, `0` feeds
//! `1, 2, 4`, and `1` heads the subtree `{1, 3, 5, 7}`.
//!
//! Every hop carries a frame whose first byte says whether the data is
//! valid. A process that cannot hear from its parent, or hears a failure
//! frame, passes a failure frame down instead of data.

use alloc::vec::Vec;

use bytes::{BufMut, Bytes, BytesMut};

use super::{CommError, Communicator};

const FRAME_DATA: u8 = 0;
const FRAME_FAILED: u8 = 1;

const SUB_DOWN: u64 = 0;
const SUB_UP: u64 = 1;

fn data_frame(payload: &[u8]) -> Bytes {
    let mut b = BytesMut::with_capacity(payload.len() + 1);
    b.put_u8(FRAME_DATA);
    b.put_slice(payload);
    b.freeze()
}

fn failed_frame() -> Bytes {
    Bytes::from_static(&[FRAME_FAILED])
}

fn open_frame(frame: &Bytes) -> Option<Bytes> {
    match frame.first() {
        Some(&FRAME_DATA) => Some(frame.slice(1..)),
        _ => None,
    }
}

pub(crate) fn parent(v: usize) -> Option<usize> {
    if v == 0 {
        None
    } else {
        Some(v - (1 << (usize::BITS - 1 - v.leading_zeros())))
    }
}

pub(crate) fn children(v: usize, n: usize) -> impl Iterator<Item = usize> {
    (0..usize::BITS)
        .map(|j| 1usize << j)
        .take_while(move |&b| b < n)
        .filter(move |&b| b > v)
        .map(move |b| v + b)
        .filter(move |&c| c < n)
}

/// Element-wise combiner for `i64` vectors.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Prod,
    Min,
    Max,
    BitAnd,
    BitOr,
}

impl ReduceOp {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Prod => a.wrapping_mul(b),
            ReduceOp::Min => a.min(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::BitAnd => a & b,
            ReduceOp::BitOr => a | b,
        }
    }

    pub fn combine_bytes(self, a: &[u8], b: &[u8]) -> Vec<u8> {
        let x = decode_i64s(a);
        let y = decode_i64s(b);
        let out: Vec<i64> = x.iter().zip(&y).map(|(&p, &q)| self.apply(p, q)).collect();
        encode_i64s(&out).to_vec()
    }
}

pub fn encode_i64s(values: &[i64]) -> Bytes {
    let mut b = BytesMut::with_capacity(values.len() * 8);
    for &v in values {
        b.put_i64_le(v);
    }
    b.freeze()
}

pub fn decode_i64s(bytes: &[u8]) -> Vec<i64> {
    bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

impl Communicator {
    fn vrank(&self, root: usize) -> usize {
        (self.rank() + self.size() - root) % self.size()
    }

    fn real(&self, v: usize, root: usize) -> usize {
        (v + root) % self.size()
    }

    fn check_root(&self, root: usize) -> Result<(), CommError> {
        if root >= self.size() {
            Err(CommError::InvalidArgument("root out of range"))
        } else {
            Ok(())
        }
    }

    /// Broadcast along the tree. Succeeds at a process iff its path from
    /// the root crosses no crashed process, so outcomes may differ between
    /// processes.
    pub async fn bcast_raw(&self, root: usize, payload: Option<Bytes>) -> Result<Bytes, CommError> {
        if self.rank() == root && payload.is_none() {
            return Err(CommError::InvalidArgument("root must supply the payload"));
        }
        self.bcast_framed(root, payload).await
    }

    /// Broadcast where the root may hand down a failure instead of data
    /// (`None`), as layered algorithms do when an earlier stage failed.
    pub async fn bcast_framed(&self, root: usize, payload: Option<Bytes>) -> Result<Bytes, CommError> {
        self.check_root(root)?;
        if self.is_revoked() {
            return Err(CommError::Revoked);
        }
        let seq = self.next_seq();
        self.bcast_seq(root, seq, SUB_DOWN, payload).await
    }

    async fn bcast_seq(&self, root: usize, seq: u64, sub: u64, payload: Option<Bytes>) -> Result<Bytes, CommError> {
        let n = self.size();
        let v = self.vrank(root);
        let frame = match parent(v) {
            None => payload.as_deref().map_or_else(failed_frame, data_frame),
            Some(p) => match self.recv_seq(self.real(p, root), seq, sub).await {
                Ok(f) => f,
                Err(CommError::Revoked) => return Err(CommError::Revoked),
                Err(_) => failed_frame(),
            },
        };
        for c in children(v, n) {
            self.send_seq(self.real(c, root), seq, sub, frame.clone());
        }
        open_frame(&frame).ok_or(CommError::ProcFailed)
    }

    /// Tree reduction with a caller-supplied combiner, followed by a
    /// broadcast of the status (or of the result when `share` is set), so
    /// every process learns of a failure anywhere in the tree. The root, and
    /// everyone when `share` is set, gets the combined value. A `None`
    /// value contributes a failure.
    pub async fn reduce_framed(
        &self,
        root: usize,
        value: Option<Bytes>,
        combine: &dyn Fn(&[u8], &[u8]) -> Vec<u8>,
        share: bool,
    ) -> Result<Option<Bytes>, CommError> {
        self.check_root(root)?;
        if self.is_revoked() {
            return Err(CommError::Revoked);
        }
        let seq = self.next_seq();
        let n = self.size();
        let v = self.vrank(root);
        let mut acc: Option<Vec<u8>> = value.map(|v| v.to_vec());
        let kids: Vec<usize> = children(v, n).collect();
        for &c in kids.iter().rev() {
            let got = match self.recv_seq(self.real(c, root), seq, SUB_UP).await {
                Ok(f) => open_frame(&f),
                Err(CommError::Revoked) => return Err(CommError::Revoked),
                Err(_) => None,
            };
            acc = match (acc, got) {
                (Some(a), Some(b)) => Some(combine(&a, &b)),
                _ => None,
            };
        }
        if let Some(p) = parent(v) {
            let frame = acc.as_deref().map_or_else(failed_frame, data_frame);
            self.send_seq(self.real(p, root), seq, SUB_UP, frame);
        }
        let down = match &acc {
            Some(a) if v == 0 && share => Some(Bytes::from(a.clone())),
            Some(_) if v == 0 => Some(Bytes::new()),
            _ => None,
        };
        let result = self.bcast_seq(root, seq, SUB_DOWN, down).await?;
        if share {
            Ok(Some(result))
        } else if v == 0 {
            Ok(acc.map(Bytes::from))
        } else {
            Ok(None)
        }
    }

    pub async fn reduce_raw(&self, root: usize, values: &[i64], op: ReduceOp) -> Result<Option<Vec<i64>>, CommError> {
        let out = self
            .reduce_framed(root, Some(encode_i64s(values)), &|a, b| op.combine_bytes(a, b), false)
            .await?;
        Ok(out.map(|b| decode_i64s(&b)))
    }

    /// Reduce to rank 0, then broadcast the result.
    pub async fn allreduce_raw(&self, values: &[i64], op: ReduceOp) -> Result<Vec<i64>, CommError> {
        let out = self
            .reduce_framed(0, Some(encode_i64s(values)), &|a, b| op.combine_bytes(a, b), true)
            .await?;
        Ok(decode_i64s(&out.expect("shared result")))
    }

    pub async fn barrier_raw(&self) -> Result<(), CommError> {
        self.allreduce_raw(&[], ReduceOp::Sum).await.map(|_| ())
    }

    /// Point-to-point transfer of `payload` from rank `from` to rank `to` on
    /// a collective sequence number. Every member calls it so that sequence
    /// numbers stay aligned; only the two endpoints communicate.
    pub async fn hop_framed(&self, from: usize, to: usize, payload: Option<Bytes>) -> Result<Option<Bytes>, CommError> {
        if self.is_revoked() {
            return Err(CommError::Revoked);
        }
        let seq = self.next_seq();
        if from == to {
            return Ok(if self.rank() == to { payload } else { None });
        }
        if self.rank() == from {
            let frame = payload.as_deref().map_or_else(failed_frame, data_frame);
            self.send_seq(to, seq, SUB_DOWN, frame);
            Ok(None)
        } else if self.rank() == to {
            let f = self.recv_seq(from, seq, SUB_DOWN).await?;
            open_frame(&f).map(Some).ok_or(CommError::ProcFailed)
        } else {
            Ok(None)
        }
    }
}
