use pmkit::ds::{DsKind, Mode};
use pmkit::harness::{crash_sweep, enumerate_events, trace, SweepReport, Target};
use pmkit::workload::{Mix, OpKind, WorkloadSpec};
use pmkit::{Backend, Error};

fn workload() -> WorkloadSpec {
    WorkloadSpec::single(20, 20)
}

// Frozen from a reference run; any change in the persistence protocol of a
// backend or structure shows up here first.
#[test]
fn event_counts_are_stable() {
    let expected = [
        (Backend::Redo, DsKind::Set, Mode::Coarse, 204),
        (Backend::Redo, DsKind::HtClosed, Mode::Fine, 504),
        (Backend::Redo, DsKind::HtOpen, Mode::Coarse, 130),
        (Backend::Undo, DsKind::Set, Mode::Coarse, 217),
        (Backend::Undo, DsKind::HtClosed, Mode::Fine, 367),
        (Backend::Undo, DsKind::HtOpen, Mode::Coarse, 172),
        (Backend::Named, DsKind::Set, Mode::Coarse, 55),
        (Backend::Named, DsKind::HtClosed, Mode::Fine, 63),
        (Backend::Named, DsKind::HtOpen, Mode::Coarse, 59),
    ];
    for (b, d, m, n) in expected {
        let target = Target::new(b, d, m);
        assert_eq!(enumerate_events(&workload(), &target).unwrap(), n, "{b} {d} {m}");
        assert_eq!(enumerate_events(&workload(), &target).unwrap(), n, "repeat {b} {d} {m}");
    }
}

#[test]
fn acks_are_monotone_and_inside_the_run() {
    for b in Backend::ALL {
        let (events, t) = trace(&workload(), &Target::new(b, DsKind::Set, Mode::Fine)).unwrap();
        let acks: Vec<u64> = t.0.iter().filter_map(|e| e.ack_event).collect();
        assert!(acks.windows(2).all(|w| w[0] <= w[1]), "{b}");
        assert!(acks.iter().all(|&a| a <= events));
        let mutations = t.0.iter().filter(|e| e.result && e.kind != OpKind::Find).count();
        assert_eq!(acks.len(), mutations, "{b}: every mutation is eventually acknowledged");
    }
}

#[test]
fn sweep_rows_cover_every_event_and_round_trip_as_csv() {
    let w = WorkloadSpec::single(6, 3);
    let target = Target::new(Backend::Undo, DsKind::HtOpen, Mode::Coarse);
    let report = crash_sweep(&w, &target, true).unwrap();
    assert!(report.all_passed(), "{:?}", report.failures().next());
    assert_eq!(report.rows.len() as u64, (report.events + 1) * 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    report.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let back = SweepReport::read_csv(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, report.rows);
}

#[test]
fn concurrent_workloads_are_not_swept() {
    let w = WorkloadSpec {
        threads: 2,
        ..workload()
    };
    let target = Target::new(Backend::Redo, DsKind::Set, Mode::Fine);
    assert!(matches!(crash_sweep(&w, &target, false), Err(Error::Config(_))));
}

#[test]
fn one_insert_event_counts() {
    let one = WorkloadSpec {
        ops_per_thread: 1,
        mix: Mix::new(100, 0, 0).unwrap(),
        ..workload()
    };
    // (creation of pool and empty set, cost of the insert)
    let expected = [(Backend::Redo, 51, 17), (Backend::Undo, 46, 19), (Backend::Named, 22, 11)];
    for (b, empty, insert) in expected {
        let t = Target::new(b, DsKind::Set, Mode::Coarse);
        let base = enumerate_events(&WorkloadSpec::single(0, 0), &t).unwrap();
        assert_eq!(base, empty, "{b}");
        assert_eq!(enumerate_events(&one, &t).unwrap() - base, insert, "{b}");
    }
}

#[test]
fn sweeps_are_deterministic() {
    let w = WorkloadSpec::single(5, 11);
    for b in Backend::ALL {
        let t = Target::new(b, DsKind::HtClosed, Mode::Coarse);
        assert_eq!(crash_sweep(&w, &t, true).unwrap(), crash_sweep(&w, &t, true).unwrap(), "{b}");
    }
}

#[test]
fn single_run_matches_a_plain_execution() {
    use pmkit::ds::{DsOptions, Structure};
    use pmkit::harness::{multi_run, MultiRunOptions};
    let w = WorkloadSpec::single(60, 4);
    let t = Target::new(Backend::Redo, DsKind::Set, Mode::Coarse);
    let rep = multi_run(&w, &t, &MultiRunOptions::default()).unwrap();
    assert!(rep.passed());
    let o = t.pool_options();
    let pool = pmkit::Pool::create_in(pmkit::PersistDomain::new(o.size), &o).unwrap();
    let s = Structure::create(&pool, DsKind::Set, Mode::Coarse, DsOptions::default()).unwrap();
    for op in w.thread_ops(0, 0) {
        match op.kind {
            OpKind::Insert => s.add(op.key, op.value),
            OpKind::Delete => s.remove(op.key),
            OpKind::Find => s.contains(op.key),
        }
        .unwrap();
    }
    assert_eq!(rep.final_entries, s.entries().unwrap());
}

#[test]
fn second_run_sees_the_first() {
    use pmkit::harness::{multi_run, MultiRunOptions, PoolLocation};
    let dir = tempfile::tempdir().unwrap();
    for b in Backend::ALL {
        let w = WorkloadSpec {
            ops_per_thread: 80,
            runs: 2,
            key_hi: 40,
            ..workload()
        };
        let opts = MultiRunOptions {
            reinit_every: None,
            location: PoolLocation::File {
                path: dir.path().join(format!("{b}.pool")),
                sim: pmkit::SimMode::Simulate,
            },
        };
        let rep = multi_run(&w, &Target::new(b, DsKind::Set, Mode::Fine), &opts).unwrap();
        assert!(rep.passed(), "{b}: {:?}", rep.runs);
        assert!(!rep.runs[1].reinit && rep.runs[1].recovery_ms > 0.0);
    }
}
