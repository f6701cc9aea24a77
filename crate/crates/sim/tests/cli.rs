use std::io::Write;
use std::process::{Command, Output};

use legio_core::simnet::ProcessId;
use legio_sim::HarnessError;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_legio-sim")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn cost_table_header_and_summary() {
    let o = cli(&["cost", "--shrink", "linear"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("s,k,cost_master,cost_nonmaster,cost_expected,k_scan,k_eq3,k_eq4"));
    let row256 = out.lines().find(|l| l.starts_with("256,")).unwrap();
    assert!(row256.starts_with("256,8,"), "{row256}");
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("master-case 17") && err.contains("expected-cost 7") && err.contains("11"), "{err}");
}

#[test]
fn cost_single_size() {
    let o = cli(&["cost", "--size", "64", "--k", "4"]);
    let out = stdout(&o);
    let row = out.lines().nth(1).unwrap();
    assert!(row.starts_with("64,4,30.0,4.0,10.5,"), "{row}");
}

#[test]
fn bench_csv() {
    let o = cli(&["bench", "--procs", "6", "--mode", "hier", "--k", "3", "--op", "reduce", "--reps", "3", "--msg-size", "1k,2k"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "op,procs,mode,msg_size,rep,steps,messages,repairs,outcome");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("reduce,6,hier,1024,0,"));
    assert!(lines.iter().skip(1).all(|l| l.ends_with(",0,success")));
}

#[test]
fn bench_is_reproducible() {
    let args = ["bench", "--procs", "8", "--op", "allreduce", "--reps", "2", "--seed", "4"];
    assert_eq!(stdout(&cli(&args)), stdout(&cli(&args)));
}

#[test]
fn flat_never_cheaper_than_raw() {
    for op in ["bcast", "reduce", "allreduce", "barrier", "gather", "scatter"] {
        let steps = |mode: &str| -> u64 {
            let o = cli(&["bench", "--procs", "16", "--mode", mode, "--op", op]);
            stdout(&o).lines().nth(1).unwrap().split(',').nth(5).unwrap().parse().unwrap()
        };
        assert!(steps("none") <= steps("flat"), "{op}");
    }
}

#[test]
fn schedule_file_and_trace_export() {
    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("faults.txt");
    let mut f = std::fs::File::create(&sched).unwrap();
    writeln!(f, "# crash rank 3 during the run\n3,40").unwrap();
    let trace = dir.path().join("trace.csv");
    let csv = dir.path().join("out.csv");
    let o = cli(&[
        "bench", "--procs", "8", "--op", "barrier", "--reps", "4",
        "--schedule", sched.to_str().unwrap(),
        "--trace", trace.to_str().unwrap(),
        "--csv", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(t.lines().next(), Some("step,kind,src,dst,tag,detail"));
    assert!(t.lines().any(|l| l.contains(",CRASH,3,")), "no crash line");
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.lines().skip(1).map(|l| l.split(',').nth(7).unwrap().parse::<u32>().unwrap()).sum::<u32>() >= 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "1,5\nnot a line\n").unwrap();
    let o = cli(&["bench", "--schedule", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let far = dir.path().join("far.txt");
    std::fs::write(&far, "99,5\n").unwrap();
    assert_eq!(cli(&["bench", "--procs", "8", "--schedule", far.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cli(&["repair", "--mode", "flat", "--victim", "master"]).status.code(), Some(2));
    assert_eq!(cli(&["bench", "--reps", "0"]).status.code(), Some(2));
    assert_eq!(cli(&["bench", "--mode", "tree"]).status.code(), Some(2));
}

#[test]
fn deadlock_maps_to_exit_3() {
    let e = HarnessError::Deadlock { step: 4, blocked: vec![ProcessId(1)] };
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn repair_and_apps() {
    let o = cli(&["repair", "--procs", "32", "--mode", "hier", "--k", "8", "--victim", "master"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("procs,mode,k,victim_kind,victim,participants,steps,events,repairs"));
    assert!(out.lines().nth(1).unwrap().starts_with("32,hier,8,master,8,"));

    let o = cli(&["ep", "--procs", "4", "--pairs", "1000"]);
    assert!(stdout(&o).contains("attempted=4000"));

    let o = cli(&["farm", "--procs", "4", "--tasks", "8", "--top", "2"]);
    let out = stdout(&o);
    assert!(out.starts_with("status=success repairs=0 missing=0"), "{out}");
    assert_eq!(out.lines().count(), 3);
}
