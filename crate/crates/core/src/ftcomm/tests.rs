use alloc::vec;
use alloc::vec::Vec;
use core::future::Future;

use bytes::Bytes;

use super::*;
use crate::simnet::{run_deterministic, spawn_world, FaultSchedule, RunOutcome, RunReport, Step};

fn pid(i: u32) -> ProcessId {
    ProcessId(i)
}

fn run<T: 'static, Fut: Future<Output = T> + 'static>(
    n: usize,
    crashes: &[(u32, Step)],
    program: impl FnMut(Communicator) -> Fut,
) -> RunReport<T> {
    let mut program = program;
    let schedule = FaultSchedule::new(crashes.iter().map(|&(v, s)| (pid(v), s)).collect()).unwrap();
    let world = spawn_world(n, 11, schedule).unwrap();
    run_deterministic(world, move |ctx| program(Communicator::world(&ctx)))
}

/// Binomial path oracle: a rank succeeds iff no process on its path from
/// the root (inclusive) is crashed.
fn bcast_oracle(n: usize, root: usize, crashed: &[usize]) -> Vec<Option<bool>> {
    (0..n)
        .map(|r| {
            if crashed.contains(&r) {
                return None;
            }
            let mut v = (r + n - root) % n;
            loop {
                if crashed.contains(&((v + root) % n)) {
                    return Some(false);
                }
                if v == 0 {
                    return Some(true);
                }
                v -= 1 << (usize::BITS - 1 - v.leading_zeros());
            }
        })
        .collect()
}

#[test]
fn local_queries_survive_crashes() {
    let r = run(4, &[(1, 0)], |c| async move {
        c.ctx().yield_now().await;
        c.ctx().yield_now().await;
        (c.rank_of(pid(2)), c.size(), c.rank())
    });
    assert_eq!(r.outputs[2], Some((Ok(2), 4, 2)));
    assert_eq!(r.outputs[0].as_ref().unwrap().0, Ok(2));
}

#[test]
fn rank_of_non_member_is_invalid() {
    let r = run(2, &[], |c| async move { c.rank_of(pid(7)) });
    assert!(matches!(r.outputs[0], Some(Err(CommError::InvalidArgument(_)))));
}

#[test]
fn p2p_in_faulty_communicator() {
    let r = run(4, &[(3, 0)], |c| async move {
        c.ctx().yield_now().await;
        match c.rank() {
            0 => {
                let ok = c.send(1, 5, Bytes::from_static(b"hi"));
                let dead = c.send(3, 5, Bytes::from_static(b"hi"));
                (code_of(&ok), code_of(&dead))
            }
            1 => {
                let got = c.recv(0, 5).await;
                let dead = c.recv(3, 5).await;
                (code_of(&got), code_of(&dead))
            }
            _ => (ErrorCode::Success, ErrorCode::Success),
        }
    });
    assert_eq!(r.outputs[0], Some((ErrorCode::Success, ErrorCode::ProcFailed)));
    assert_eq!(r.outputs[1], Some((ErrorCode::Success, ErrorCode::ProcFailed)));
}

#[test]
fn revoke_blocks_nonlocal_but_not_local() {
    let r = run(4, &[], |c| async move {
        if c.rank() == 0 {
            c.revoke();
            c.revoke();
        }
        let got = c.recv((c.rank() + 1) % 4, 1).await;
        let send = c.send(1, 1, Bytes::new());
        (code_of(&got), code_of(&send), c.rank_of(c.me()).is_ok())
    });
    assert!(r.completed());
    for o in r.outputs.iter() {
        assert_eq!(*o, Some((ErrorCode::Revoked, ErrorCode::Revoked, true)));
    }
}

#[test]
fn bcast_without_faults() {
    let r = run(8, &[], |c| async move {
        let payload = (c.rank() == 0).then(|| Bytes::from_static(b"payload"));
        c.bcast_raw(0, payload).await
    });
    for o in &r.outputs {
        assert_eq!(o.as_ref().unwrap().as_deref(), Ok(&b"payload"[..]));
    }
}

#[test]
fn bcast_matches_path_oracle() {
    for root in 0..8 {
        for victim in 0..8u32 {
            let r = run(8, &[(victim, 0)], move |c| async move {
                let payload = (c.rank() == root).then(|| Bytes::from_static(b"x"));
                c.bcast_raw(root, payload).await.is_ok()
            });
            assert!(r.completed());
            assert_eq!(r.outputs, bcast_oracle(8, root, &[victim as usize]), "root={root} victim={victim}");
        }
    }
}

#[test]
fn bcast_rank1_crash_splits_outcomes() {
    let r = run(8, &[(1, 0)], |c| async move {
        let payload = (c.rank() == 0).then(|| Bytes::from_static(b"x"));
        code_of(&c.bcast_raw(0, payload).await)
    });
    let ok: Vec<usize> = (0..8).filter(|&i| r.outputs[i] == Some(ErrorCode::Success)).collect();
    let failed: Vec<usize> = (0..8).filter(|&i| r.outputs[i] == Some(ErrorCode::ProcFailed)).collect();
    assert_eq!(ok, [0, 2, 4, 6]);
    assert_eq!(failed, [3, 5, 7]);
}

#[test]
fn bcast_dead_root_fails_everywhere() {
    let r = run(8, &[(0, 0)], |c| async move { code_of(&c.bcast_raw(0, None).await) });
    assert!(r.outputs[1..].iter().all(|o| *o == Some(ErrorCode::ProcFailed)));
}

#[test]
fn reduce_sum() {
    let r = run(4, &[], |c| async move { c.reduce_raw(0, &[c.rank() as i64 + 1], ReduceOp::Sum).await });
    assert_eq!(r.outputs[0], Some(Ok(Some(vec![10]))));
    assert_eq!(r.outputs[3], Some(Ok(None)));
}

#[test]
fn reduce_family_notices_uniformly() {
    for victim in 0..8u32 {
        let r = run(8, &[(victim, 0)], |c| async move {
            let a = code_of(&c.reduce_raw(3, &[1], ReduceOp::Sum).await);
            let b = code_of(&c.allreduce_raw(&[1], ReduceOp::Max).await);
            let d = code_of(&c.barrier_raw().await);
            (a, b, d)
        });
        assert!(r.completed());
        for (i, o) in r.outputs.iter().enumerate() {
            if i as u32 != victim {
                let f = ErrorCode::ProcFailed;
                assert_eq!(*o, Some((f, f, f)), "victim={victim} rank={i}");
            }
        }
    }
}

#[test]
fn allreduce_and_barrier_without_faults() {
    let r = run(5, &[], |c| async move {
        let s = c.allreduce_raw(&[c.rank() as i64, 1], ReduceOp::Sum).await;
        (s, c.barrier_raw().await)
    });
    for o in &r.outputs {
        assert_eq!(*o, Some((Ok(vec![10, 5]), Ok(()))));
    }
}

#[test]
fn dup_and_split() {
    let r = run(4, &[], |c| async move {
        let d = c.dup().await.unwrap();
        let s = c.split(Some((c.rank() % 2) as u32), 0).await.unwrap().unwrap();
        (d.cid() != c.cid(), d.members().to_vec(), d.epoch(), s.members().to_vec())
    });
    let o = r.outputs[1].clone().unwrap();
    assert!(o.0);
    assert_eq!(o.1, (0..4).map(pid).collect::<Vec<_>>());
    assert_eq!(o.2, 0);
    assert_eq!(o.3, vec![pid(1), pid(3)]);
    assert_eq!(r.outputs[2].clone().unwrap().3, vec![pid(0), pid(2)]);
}

#[test]
fn creators_refuse_faulty_communicators() {
    let r = run(4, &[(2, 0)], |c| async move {
        let d = c.dup().await.map(|_| ());
        let s = c.split(Some(0), 0).await.map(|_| ());
        let g = c.create_groups(&[vec![pid(0), pid(1)]]).await.map(|_| ());
        (d, s, g)
    });
    for (i, o) in r.outputs.iter().enumerate() {
        if i != 2 {
            let e = Err(CommError::ProcFailed);
            assert_eq!(*o, Some((e.clone(), e.clone(), e)));
        }
    }
}

#[test]
fn shrink_compacts_in_order() {
    let r = run(4, &[(2, 0)], |c| async move {
        let s = c.shrink().await;
        (s.members().to_vec(), s.rank(), s.epoch())
    });
    assert_eq!(r.outputs[3], Some((vec![pid(0), pid(1), pid(3)], 2, 1)));
    assert_eq!(r.outputs[1], Some((vec![pid(0), pid(1), pid(3)], 1, 1)));
    assert_eq!(r.trace.of_kind("TERM").count(), 3);
}

#[test]
fn shrink_without_faults_bumps_epoch() {
    let r = run(3, &[], |c| async move {
        let s = c.shrink().await;
        (s.members().len(), s.epoch())
    });
    assert!(r.outputs.iter().all(|o| *o == Some((3, 1))));
}

#[test]
fn shrink_256_identical_views() {
    let r = run(256, &[(77, 0)], |c| async move { c.shrink().await.members().to_vec() });
    let views: Vec<_> = r.outputs.iter().flatten().collect();
    assert_eq!(views.len(), 255);
    assert!(views.iter().all(|v| *v == views[0]));
    assert!(!views[0].contains(&pid(77)));
}

#[test]
fn agree_and() {
    let r = run(4, &[(3, 0)], |c| async move {
        let a = c.agree(true).await;
        let b = c.agree(c.rank() != 1).await;
        (a, b)
    });
    for o in r.outputs.iter().flatten() {
        assert_eq!(*o, (true, false));
    }
}

#[test]
fn agree_after_bnp_is_uniform_false() {
    let r = run(8, &[(1, 0)], |c| async move {
        let payload = (c.rank() == 0).then(|| Bytes::from_static(b"x"));
        let ok = c.bcast_raw(0, payload).await.is_ok();
        c.agree_detailed(ok).await
    });
    for o in r.outputs.iter().flatten() {
        assert_eq!(*o, (false, vec![pid(1)]));
    }
}

#[test]
fn reform_variants() {
    let r = run(6, &[(2, 0)], |c| async move {
        let target = Group::new(vec![pid(0), pid(1), pid(3), pid(5)]).unwrap();
        let out = if target.members().contains(&c.me()) {
            let f = c.reform(&target).await.unwrap();
            Some((f.members().to_vec(), f.epoch()))
        } else {
            None
        };
        let empty = c.reform(&Group::new(Vec::new()).unwrap()).await.map(|_| ());
        (out, empty)
    });
    let (out, empty) = r.outputs[5].clone().unwrap();
    assert_eq!(out, Some((vec![pid(0), pid(1), pid(3), pid(5)], 1)));
    assert!(matches!(empty, Err(CommError::InvalidArgument(_))));
}

#[test]
fn reform_with_crashed_member_is_retriable() {
    let r = run(4, &[(2, 0)], |c| async move {
        let all = Group::new((0..4).map(pid).collect()).unwrap();
        let first = c.reform(&all).await.map(|_| ());
        let keep = Group::new(vec![pid(0), pid(1), pid(3)]).unwrap();
        let second = c.reform(&keep).await.unwrap();
        (first, second.size())
    });
    assert_eq!(r.outputs[0], Some((Err(CommError::ProcFailed), 3)));
}

#[test]
fn reform_same_membership_bumps_epoch() {
    let r = run(3, &[], |c| async move {
        let g = Group::new(c.members().to_vec()).unwrap();
        let f = c.reform(&g).await.unwrap();
        (f.members() == c.members(), f.epoch())
    });
    assert!(r.outputs.iter().all(|o| *o == Some((true, 1))));
}

#[test]
fn group_rejects_duplicates() {
    assert!(Group::new(vec![pid(1), pid(1)]).is_err());
}

#[test]
fn file_write_blocks() {
    let r = run(4, &[], |c| async move {
        let block = [c.rank() as u8; 3];
        c.file_write_at_all("out", c.rank() * 3, &block).await
    });
    assert!(r.completed());
    assert_eq!(r.store["out"], vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
}

#[test]
fn file_write_on_faulty_comm_traps() {
    let r = run(4, &[(1, 0)], |c| async move {
        let _ = c.file_write_at_all("out", c.rank(), &[1]).await;
    });
    assert!(matches!(r.outcome, RunOutcome::Trapped { .. }));
}

#[test]
fn window_put_then_fence() {
    let r = run(3, &[], |c| async move {
        let w = c.win_create("w", 4).await.unwrap();
        if c.rank() == 0 {
            w.put(2, 1, &[9, 9]).await.unwrap();
        }
        w.fence().await.unwrap();
        w.local()
    });
    assert_eq!(r.outputs[2], Some(vec![0, 9, 9, 0]));
    assert_eq!(r.outputs[1], Some(vec![0; 4]));
}

#[test]
fn hop_moves_payload() {
    let r = run(4, &[], |c| async move {
        let p = (c.rank() == 3).then(|| Bytes::from_static(b"z"));
        c.hop_framed(3, 1, p).await
    });
    assert_eq!(r.outputs[1], Some(Ok(Some(Bytes::from_static(b"z")))));
    assert_eq!(r.outputs[0], Some(Ok(None)));
}
