//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;

use bytes::Bytes;
use legio_core::cost::{
    break_even_size, eq3_k, optimal_k, Metric, Rounding, ShrinkCostFn,
};
use legio_core::flat::{Policy, ResilientComm};
use legio_core::ftcomm::{code_of, encode_i64s, Communicator, ErrorCode, ReduceOp};
use legio_core::hier::{HierComm, RepairReport, REPAIR_KINDS};
use legio_core::simnet::{run_deterministic, spawn_world, FaultSchedule, ProcessId, RunReport, Step};
use legio_sim::comm::{AppComm, Mode, Status};
use legio_sim::repair::{ready_step, run_repair_bench, VictimKind};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn schedule(crashes: &[(usize, Step)]) -> FaultSchedule {
    FaultSchedule::new(crashes.iter().map(|&(v, s)| (ProcessId(v as u32), s)).collect()).unwrap()
}

/// Random victims (at most `max`) crashing in `[from, from + window)`.
fn random_crashes(rng: &mut ChaCha8Rng, n: usize, max: usize, from: Step, window: Step) -> Vec<(usize, Step)> {
    let count = rng.random_range(1..=max);
    sample(rng, n, count).into_iter().map(|v| (v, from + rng.random_range(0..window))).collect()
}

// ---------------------------------------------------------------- 1

fn membership_agreement() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut runs = 0;
    for &n in &[8usize, 16, 32, 64] {
        let ready = ready_step(n, Mode::Flat, 2, 7).map_err(|e| e.to_string())?;
        for _ in 0..250 {
            let crashes = random_crashes(&mut rng, n, n / 2, ready, 60);
            let last = crashes.iter().map(|c| c.1).max().unwrap();
            let world = spawn_world(n, 7, schedule(&crashes)).unwrap();
            let r = run_deterministic(world, |ctx| async move {
                let rc = ResilientComm::wrap(&Communicator::world(&ctx), Policy::Skip).await.ok()?;
                for _ in 0..10 {
                    rc.barrier().await;
                }
                Some((rc.sub().members().to_vec(), ctx.now()))
            });
            runs += 1;
            if !r.completed() {
                return Err(format!("n={n} {crashes:?}: {:?}", r.outcome));
            }
            let dead: BTreeSet<usize> = crashes.iter().map(|c| c.0).collect();
            let want: Vec<ProcessId> = (0..n).filter(|r| !dead.contains(r)).map(|r| ProcessId(r as u32)).collect();
            for (i, o) in r.outputs.iter().enumerate() {
                match (dead.contains(&i), o) {
                    (true, None) => {}
                    (false, Some(Some((members, end)))) => {
                        if *end <= last {
                            return Err(format!("n={n}: run ended at {end} before the last crash at {last}"));
                        }
                        if *members != want {
                            return Err(format!("n={n} {crashes:?}: rank {i} holds {members:?}"));
                        }
                    }
                    _ => return Err(format!("n={n} {crashes:?}: rank {i} output {o:?}")),
                }
            }
        }
    }
    Ok(format!("{runs} schedules, zero violations"))
}

// ---------------------------------------------------------------- 2

fn bnp() -> Verdict {
    let world = spawn_world(8, 3, schedule(&[(1, 0)])).unwrap();
    let r = run_deterministic(world, |ctx| async move {
        let c = Communicator::world(&ctx);
        let payload = (c.rank() == 0).then(|| Bytes::from_static(b"payload"));
        let b = c.bcast_raw(0, payload).await;
        let a = code_of(&c.allreduce_raw(&[1], ReduceOp::Sum).await);
        let decision = c.agree_detailed(b.is_ok()).await;
        (code_of(&b), a, decision)
    });
    let outs: Vec<_> = r.outputs.iter().flatten().collect();
    let ok = outs.iter().filter(|o| o.0 == ErrorCode::Success).count();
    let failed = outs.iter().filter(|o| o.0 == ErrorCode::ProcFailed).count();
    if ok == 0 || failed == 0 {
        return Err(format!("bcast_raw not split: {ok} success, {failed} failed"));
    }
    if !outs.iter().all(|o| o.1 == ErrorCode::ProcFailed) {
        return Err("allreduce_raw outcomes differ".into());
    }
    let first = &outs[0].2;
    if first.0 || !outs.iter().all(|o| o.2 == *first) {
        return Err("agree decision is not a uniform retry".into());
    }
    Ok(format!("bcast_raw {ok} ok / {failed} failed, allreduce_raw uniform, agree uniform retry"))
}

// ---------------------------------------------------------------- 3, 9, 10

#[derive(Clone, Debug, PartialEq)]
struct OpRecord {
    op: &'static str,
    root: usize,
    status: Status,
    rank_before: usize,
    rank_after: usize,
    live: Vec<usize>,
    before: Vec<u8>,
    after: Vec<u8>,
}

#[derive(Copy, Clone)]
struct Roots {
    bcast: usize,
    reduce: usize,
    gather: usize,
    scatter: usize,
}

const BLOCK: usize = 3;

fn block_of(r: usize, seed: u64) -> [u8; BLOCK] {
    [r as u8, (r * 7) as u8, seed as u8]
}

fn values_of(r: usize) -> [i64; 2] {
    [r as i64 + 1, (r * r) as i64]
}

fn bcast_payload(root: usize, seed: u64) -> Vec<u8> {
    format!("root{root}-{seed}").into_bytes()
}

fn scatter_send(n: usize, root: usize) -> Vec<u8> {
    (0..n * BLOCK).map(|i| (i * 31 + root) as u8).collect()
}

async fn collectives(comm: AppComm, roots: Roots, seed: u64) -> Vec<OpRecord> {
    let n = comm.size();
    let me = comm.rank();
    let mut log = Vec::new();
    let mut push = |op, root, status, rank_before, comm: &AppComm, before: Vec<u8>, after: Vec<u8>| {
        log.push(OpRecord { op, root, status, rank_before, rank_after: comm.rank(), live: comm.live_ranks(), before, after })
    };

    let mut buf = if me == roots.bcast { bcast_payload(me, seed) } else { b"untouched".to_vec() };
    let before = buf.clone();
    let o = comm.bcast(roots.bcast, &mut buf).await;
    push("bcast", roots.bcast, o.status, me, &comm, before, buf);

    let mut out = vec![-5i64];
    let before = encode_i64s(&out).to_vec();
    let o = comm.reduce(roots.reduce, &values_of(me), ReduceOp::Sum, &mut out).await;
    push("reduce", roots.reduce, o.status, me, &comm, before, encode_i64s(&out).to_vec());

    let mut out = vec![-5i64];
    let before = encode_i64s(&out).to_vec();
    let o = comm.allreduce(&values_of(me), ReduceOp::Sum, &mut out).await;
    push("allreduce", 0, o.status, me, &comm, before, encode_i64s(&out).to_vec());

    let mut recv = if me == roots.gather { vec![0xEE; n * BLOCK] } else { Vec::new() };
    let before = recv.clone();
    let o = comm.gather(roots.gather, &block_of(me, seed), &mut recv).await;
    push("gather", roots.gather, o.status, me, &comm, before, recv);

    let send = if me == roots.scatter { scatter_send(n, me) } else { Vec::new() };
    let mut recv = vec![0xAB; BLOCK];
    let before = recv.clone();
    let o = comm.scatter(roots.scatter, &send, &mut recv).await;
    push("scatter", roots.scatter, o.status, me, &comm, before, recv);

    let o = comm.barrier().await;
    push("barrier", 0, o.status, me, &comm, Vec::new(), Vec::new());
    log
}

struct Scenario {
    n: usize,
    mode: Mode,
    k: usize,
    seed: u64,
    roots: Roots,
    crashes: Vec<(usize, Step)>,
}

fn run_scenario(s: &Scenario) -> RunReport<Option<Vec<OpRecord>>> {
    let (mode, k, roots, seed) = (s.mode, s.k, s.roots, s.seed);
    let world = spawn_world(s.n, s.seed, schedule(&s.crashes)).unwrap();
    run_deterministic(world, move |ctx| async move {
        let comm = AppComm::open(&ctx, mode, k, Policy::Skip).await.ok()?;
        Some(collectives(comm, roots, seed).await)
    })
}

/// The value a fault-free run over `live` produces at `me`.
fn oracle(rec: &OpRecord, me: usize, n: usize, seed: u64) -> Vec<u8> {
    let live = &rec.live;
    let sum = || {
        let mut s = [0i64; 2];
        for &r in live {
            let v = values_of(r);
            s[0] += v[0];
            s[1] += v[1];
        }
        encode_i64s(&s).to_vec()
    };
    match rec.op {
        "bcast" => bcast_payload(rec.root, seed),
        "reduce" if me == rec.root => sum(),
        "reduce" => rec.before.clone(),
        "allreduce" => sum(),
        "gather" if me == rec.root => {
            let mut out = vec![0xEE; n * BLOCK];
            for &r in live {
                out[r * BLOCK..(r + 1) * BLOCK].copy_from_slice(&block_of(r, seed));
            }
            out
        }
        "gather" => Vec::new(),
        "scatter" => scatter_send(n, rec.root)[me * BLOCK..(me + 1) * BLOCK].to_vec(),
        _ => Vec::new(),
    }
}

#[derive(Default)]
struct Tally {
    ops: usize,
    successes: usize,
    skips: usize,
    oracle_err: Option<String>,
    transparency_err: Option<String>,
}

fn check_scenario(s: &Scenario, r: &RunReport<Option<Vec<OpRecord>>>, t: &mut Tally) {
    let tag = || format!("{} n={} seed={} crashes={:?}", s.mode, s.n, s.seed, s.crashes);
    if !r.completed() {
        t.oracle_err.get_or_insert(format!("{}: {:?}", tag(), r.outcome));
        return;
    }
    // A victim scheduled after it finished never crashes.
    let dead: BTreeSet<usize> = (0..s.n).filter(|&i| r.outputs[i].is_none()).collect();
    if dead.iter().any(|d| !s.crashes.iter().any(|c| c.0 == *d)) {
        t.oracle_err.get_or_insert(format!("{}: unscheduled processes {dead:?} did not finish", tag()));
        return;
    }
    let Some(logs) = r
        .outputs
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.as_ref().map(|o| o.as_ref().map(|l| (i, l))))
        .collect::<Option<Vec<(usize, &Vec<OpRecord>)>>>()
    else {
        t.oracle_err.get_or_insert(format!("{}: a survivor could not open its communicator", tag()));
        return;
    };
    for (op_idx, _) in logs[0].1.iter().enumerate() {
        let live0 = &logs[0].1[op_idx].live;
        for &(me, log) in &logs {
            let rec = &log[op_idx];
            t.ops += 1;
            if rec.rank_before != me || rec.rank_after != me {
                t.transparency_err.get_or_insert(format!("{}: rank {me} became {}", tag(), rec.rank_after));
            }
            if &rec.live != live0 {
                t.oracle_err.get_or_insert(format!("{}: {} live sets differ", tag(), rec.op));
            }
            match rec.status {
                Status::Success => {
                    t.successes += 1;
                    if rec.after != oracle(rec, me, s.n, s.seed) {
                        t.oracle_err.get_or_insert(format!("{}: {} at rank {me}: {:?}", tag(), rec.op, rec.after));
                    }
                }
                Status::Skipped => {
                    t.skips += 1;
                    if rec.after != rec.before {
                        t.transparency_err.get_or_insert(format!("{}: skipped {} changed bytes at {me}", tag(), rec.op));
                    }
                    if !dead.contains(&rec.root) {
                        t.oracle_err.get_or_insert(format!("{}: {} skipped with live root", tag(), rec.op));
                    }
                }
                other => {
                    t.oracle_err.get_or_insert(format!("{}: {} status {other:?}", tag(), rec.op));
                }
            }
        }
    }
}

fn scenarios() -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut out = Vec::new();
    for mode in [Mode::Flat, Mode::Hier] {
        for i in 0..200u64 {
            let n = [8usize, 12, 16][i as usize % 3];
            let k = 4;
            let seed = 1000 + i;
            let ready = ready_step(n, mode, k, seed).unwrap();
            let mut root = || rng.random_range(0..n);
            let roots = Roots { bcast: root(), reduce: root(), gather: root(), scatter: root() };
            let crashes = random_crashes(&mut rng, n, n / 4, ready, 250);
            out.push(Scenario { n, mode, k, seed, roots, crashes });
        }
    }
    out
}

// ---------------------------------------------------------------- 4

fn locality() -> Verdict {
    let (n, k) = (256, 8);
    let ready = ready_step(n, Mode::Hier, k, 5).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for victim in [1usize, 9, 63, 100, 130, 255] {
        let world = spawn_world(n, 5, schedule(&[(victim, ready)])).unwrap();
        let r = run_deterministic(world, move |ctx| async move {
            let hc = HierComm::build(ResilientComm::wrap(&Communicator::world(&ctx), Policy::Skip).await.ok()?, k)
                .await
                .ok()?;
            hc.barrier().await;
            let mut out = Vec::new();
            hc.allreduce(&[1], ReduceOp::Sum, &mut out).await;
            Some(out)
        });
        if !r.completed() {
            return Err(format!("victim {victim}: {:?}", r.outcome));
        }
        let local = victim / k * k..(victim / k + 1) * k;
        let rep = RepairReport::from_trace_window(&r.trace, ready, Step::MAX);
        if rep.participants.len() > k || rep.participants.iter().any(|p| !local.contains(&p.index())) {
            return Err(format!("victim {victim}: participants {:?}", rep.participants));
        }
        let outsiders = r
            .trace
            .events()
            .iter()
            .filter(|e| e.step >= ready && REPAIR_KINDS.contains(&e.kind))
            .filter(|e| e.src.is_some_and(|p| !local.contains(&p.index())))
            .count();
        if outsiders != 0 {
            return Err(format!("victim {victim}: {outsiders} repair events outside the local"));
        }
        checked += 1;
    }
    Ok(format!("{checked} non-master victims at s=256 k=8, repair confined to the victim's local"))
}

// ---------------------------------------------------------------- 5

fn master_repair() -> Verdict {
    let mut checked = 0;
    for &(n, k) in &[(12usize, 4usize), (64, 4)] {
        let ready = ready_step(n, Mode::Hier, k, 9).map_err(|e| e.to_string())?;
        for m in (0..n).step_by(k) {
            let world = spawn_world(n, 9, schedule(&[(m, ready)])).unwrap();
            let r = run_deterministic(world, move |ctx| async move {
                let flat = ResilientComm::wrap(&Communicator::world(&ctx), Policy::Skip).await.ok()?;
                let hc = HierComm::build(flat, k).await.ok()?;
                hc.barrier().await;
                hc.barrier().await;
                let t = hc.topology();
                Some((hc.verify(), t.check_invariants(), t.master(m / k)))
            });
            if !r.completed() {
                return Err(format!("n={n} master {m}: {:?}", r.outcome));
            }
            for (i, o) in r.outputs.iter().enumerate() {
                if i == m {
                    continue;
                }
                let Some(Some((v, inv, master))) = o else { return Err(format!("n={n} master {m}: rank {i} missing")) };
                if let Err(e) = v.clone().and(inv.clone()) {
                    return Err(format!("n={n} master {m}: rank {i}: {e}"));
                }
                if *master != Some(m + 1) {
                    return Err(format!("n={n} master {m}: new master {master:?}"));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} master positions, invariants hold, lowest survivor promoted"))
}

// ---------------------------------------------------------------- 6

fn cost_shape() -> Verdict {
    let steps = |n, mode, kind| run_repair_bench(n, mode, 8, kind, 1).map(|r| r.record.steps).map_err(|e| e.to_string());
    let mut non = Vec::new();
    let mut mas = Vec::new();
    for n in [32usize, 64, 128, 256] {
        non.push(steps(n, Mode::Hier, VictimKind::NonMaster)?);
        mas.push(steps(n, Mode::Hier, VictimKind::Master)?);
    }
    let flat = steps(256, Mode::Flat, VictimKind::Flat)?;
    let (lo, hi) = (*non.iter().min().unwrap() as f64, *non.iter().max().unwrap() as f64);
    if (hi - lo) / lo > 0.10 {
        return Err(format!("non-master steps vary: {non:?}"));
    }
    if !mas.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!("master steps not increasing: {mas:?}"));
    }
    if !(non[3] < flat && flat < mas[3]) {
        return Err(format!("ordering at 256: {} / {flat} / {}", non[3], mas[3]));
    }
    Ok(format!("non-master {non:?}, master {mas:?}, at 256: {} < flat {flat} < {}", non[3], mas[3]))
}

// ---------------------------------------------------------------- 7

fn eq3_consistency() -> Verdict {
    let lin = ShrinkCostFn::Linear;
    let mut worst = 0.0f64;
    for s in 8..=4096 {
        let k = optimal_k(s, &lin).scan as f64;
        let d = (k - eq3_k(s)).abs();
        worst = worst.max(d);
        if d > 1.0 {
            return Err(format!("s={s}: scan {k}, closed form {:.3}", eq3_k(s)));
        }
    }
    let k256 = optimal_k(256, &lin).scan;
    if k256 != 8 {
        return Err(format!("optimal_k(256) = {k256}"));
    }
    Ok(format!("max |k_scan - k_eq3| = {worst:.3} over s in [8, 4096], optimal_k(256) = 8"))
}

// ---------------------------------------------------------------- 8

fn break_even() -> Verdict {
    let lin = ShrinkCostFn::Linear;
    let m = break_even_size(&lin, Metric::MasterCase, Rounding::Exact, 4096);
    let mc = break_even_size(&lin, Metric::MasterCase, Rounding::Ceil, 4096);
    let e = break_even_size(&lin, Metric::Expected, Rounding::Exact, 4096);
    let line = format!("s0 master-case {m:?} (whole locals {mc:?}), expected-cost {e:?}, published 11");
    match (m, e) {
        (Some(m), Some(e)) if m <= 17 && e <= 11 => Ok(line),
        _ => Err(line),
    }
}

// ---------------------------------------------------------------- main

fn main() {
    let scen = scenarios();
    let mut tally = Tally::default();
    let mut traces = Vec::new();
    for s in &scen {
        let r = run_scenario(s);
        check_scenario(s, &r, &mut tally);
        if traces.len() < 40 {
            traces.push((r.trace.to_lines(), r.outputs));
        }
    }
    let det = scen.iter().zip(&traces).all(|(s, (lines, outs))| {
        let again = run_scenario(s);
        again.trace.to_lines() == *lines && again.outputs == *outs
    });

    let c3: Verdict = match &tally.oracle_err {
        None => Ok(format!(
            "{} schedules, {} checks, {} successes match the survivor oracle",
            scen.len(),
            tally.ops,
            tally.successes
        )),
        Some(e) => Err(e.clone()),
    };
    let c9: Verdict = match &tally.transparency_err {
        None => Ok(format!("ranks stable in {} checks, {} skips left buffers untouched", tally.ops, tally.skips)),
        Some(e) => Err(e.clone()),
    };
    let c10: Verdict = if det {
        Ok(format!("{} scenarios replayed with identical traces and outputs", traces.len()))
    } else {
        Err("a replay diverged".into())
    };

    let results: Vec<(&str, Verdict)> = vec![
        ("membership agreement", membership_agreement()),
        ("broadcast notification problem", bnp()),
        ("survivor-oracle equivalence", c3),
        ("hierarchical locality", locality()),
        ("master repair", master_repair()),
        ("repair cost shape", cost_shape()),
        ("closed-form optimal k", eq3_consistency()),
        ("break-even size", break_even()),
        ("transparency", c9),
        ("determinism", c10),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        match v {
            Ok(msg) => println!("criterion {:>2} PASS {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

