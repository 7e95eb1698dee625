//! Crash-injection driver.
//!
//! A reference execution of a single-threaded workload counts the
//! persistence events and records, for every operation, the event at which
//! its commit (or, on the named backend, the checkpoint covering it) became
//! durable. The sweep then re-executes the workload once per event index
//! `k` with the domain armed at `k`, materializes the crash image (plain and
//! with the adversary), reopens it, and checks:
//!
//! - a second recovery leaves the durable image byte-identical
//! - the recovered structure passes [`Structure::verify`]
//! - its contents equal the committed prefix `S_j`, where `j` counts the
//!   acknowledgments at or before `k`; with the adversary `S_{j+1}` is also
//!   legal, since an unfenced marker line may already have landed
//! - named backend: the home image equals the image at that checkpoint

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ds::{self, DsKind, DsOptions, Mode, Structure};
use crate::error::{Error, Result};
use crate::persist::{CrashPlan, PersistCounters, PersistDomain, PoolImage, SimMode};
use crate::pheap::{Backend, Pool, PoolOptions, PAGE_SIZE};
use crate::workload::{Op, OpKind, WorkloadSpec};

/// Adversary seeds used per crash point when the adversary is on.
pub const ADVERSARY_SEEDS: u64 = 5;

/// What a workload runs against.
#[derive(Clone, Debug)]
pub struct Target {
    pub backend: Backend,
    pub ds: DsKind,
    pub mode: Mode,
    pub pool: PoolOptions,
    pub ds_options: DsOptions,
    /// Named backend: checkpoint after every this many operations
    /// (0 checkpoints only at the end).
    pub checkpoint_every: usize,
    pub sim: SimMode,
}

impl Target {
    /// Small simulated pool suited to exhaustive sweeps.
    pub fn new(backend: Backend, ds: DsKind, mode: Mode) -> Self {
        Target {
            backend,
            ds,
            mode,
            pool: PoolOptions::compact(backend, 512 << 10),
            ds_options: DsOptions::default(),
            checkpoint_every: 4,
            sim: SimMode::Simulate,
        }
    }

    pub fn pool_options(&self) -> PoolOptions {
        PoolOptions {
            backend: self.backend,
            ..self.pool.clone()
        }
    }

    fn named(&self) -> bool {
        self.backend == Backend::Named
    }
}

/// One executed operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub thread: usize,
    pub kind: OpKind,
    pub key: i64,
    pub value: u64,
    pub result: bool,
    pub acked: bool,
    pub ack_event: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpTrace(pub Vec<TraceEntry>);

/// Sorted key/value map replayed from operations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleState(pub BTreeMap<i64, u64>);

impl OracleState {
    /// Apply `op` and return the result a correct set reports.
    pub fn apply(&mut self, op: &Op) -> bool {
        match op.kind {
            OpKind::Insert => match self.0.entry(op.key) {
                Entry::Occupied(_) => false,
                Entry::Vacant(v) => {
                    v.insert(op.value);
                    true
                }
            },
            OpKind::Delete => self.0.remove(&op.key).is_some(),
            OpKind::Find => self.0.contains_key(&op.key),
        }
    }

    pub fn entries(&self) -> Vec<(i64, u64)> {
        self.0.iter().map(|(&k, &v)| (k, v)).collect()
    }
}

fn apply(s: &Structure<'_>, op: &Op) -> Result<bool> {
    match op.kind {
        OpKind::Insert => s.add(op.key, op.value),
        OpKind::Delete => s.remove(op.key),
        OpKind::Find => s.contains(op.key),
    }
}

/// Durable states in acknowledgment order. `states[i]` is the content
/// once `acks[i]` has happened.
struct Execution {
    pool_ready: u64,
    acks: Vec<u64>,
    states: Vec<Vec<(i64, u64)>>,
    /// Named only: masked home image for "no structure" followed by one
    /// per entry of `states`.
    images: Vec<PoolImage>,
    trace: OpTrace,
}

/// Zero the header page and the log region so home images compare on
/// object data alone.
fn masked(mut img: PoolImage, log: (u64, u64)) -> PoolImage {
    let b = img.as_mut_slice();
    b[..PAGE_SIZE as usize].fill(0);
    b[log.0 as usize..log.1 as usize].fill(0);
    img
}

fn execute(target: &Target, ops: &[Op], domain: PersistDomain, record: bool) -> Result<(Pool, Execution)> {
    let pool = Pool::create_in(domain, &target.pool_options())?;
    let named = target.named();
    let log = pool.log_region_range();
    let mut ex = Execution {
        pool_ready: pool.domain().events(),
        acks: Vec::new(),
        states: Vec::new(),
        images: Vec::new(),
        trace: OpTrace::default(),
    };
    if named && record {
        ex.images.push(masked(pool.domain().durable_image()?, log));
    }
    let s = Structure::create(&pool, target.ds, target.mode, target.ds_options)?;
    let mut oracle = OracleState::default();
    ex.acks.push(pool.stats().last_ack_event);
    ex.states.push(Vec::new());
    if named && record {
        ex.images.push(masked(pool.domain().durable_image()?, log));
    }
    let mut unacked = Vec::new();
    let checkpoint = |ex: &mut Execution, oracle: &OracleState, unacked: &mut Vec<usize>| -> Result<()> {
        if pool.checkpoint()?.pages == 0 {
            return Ok(());
        }
        let ack = pool.stats().last_ack_event;
        ex.acks.push(ack);
        ex.states.push(oracle.entries());
        if record {
            ex.images.push(masked(pool.domain().durable_image()?, log));
        }
        for i in unacked.drain(..) {
            let e: &mut TraceEntry = &mut ex.trace.0[i];
            e.acked = true;
            e.ack_event = Some(ack);
        }
        Ok(())
    };
    for (i, op) in ops.iter().enumerate() {
        let commits = pool.stats().commits;
        let result = apply(&s, op)?;
        let expected = oracle.apply(op);
        if result != expected {
            return Err(Error::Backend(format!(
                "op {i} ({} {}) returned {result}, sequential replay says {expected}",
                op.kind, op.key
            )));
        }
        let mutated = pool.stats().commits != commits;
        let mut entry = TraceEntry {
            thread: 0,
            kind: op.kind,
            key: op.key,
            value: op.value,
            result,
            acked: false,
            ack_event: None,
        };
        if mutated && !named {
            let ack = pool.stats().last_ack_event;
            entry.acked = true;
            entry.ack_event = Some(ack);
            ex.acks.push(ack);
            ex.states.push(oracle.entries());
        }
        ex.trace.0.push(entry);
        if mutated && named {
            unacked.push(i);
        }
        if named && target.checkpoint_every > 0 && (i + 1) % target.checkpoint_every == 0 {
            checkpoint(&mut ex, &oracle, &mut unacked)?;
        }
    }
    if named {
        checkpoint(&mut ex, &oracle, &mut unacked)?;
    }
    drop(s);
    Ok((pool, ex))
}

fn check_reference(target: &Target, workload: &WorkloadSpec) -> Result<Vec<Op>> {
    workload.validate()?;
    if target.sim == SimMode::Direct {
        return Err(Error::DirectMode);
    }
    if workload.threads != 1 {
        return Err(Error::Config("exhaustive sweeps run a single thread".into()));
    }
    Ok(workload.thread_ops(0, 0))
}

/// Total persistence events of one run of `workload`, pool creation
/// included.
pub fn enumerate_events(workload: &WorkloadSpec, target: &Target) -> Result<u64> {
    let ops = check_reference(target, workload)?;
    let (pool, _) = execute(target, &ops, PersistDomain::new(target.pool.size), false)?;
    Ok(pool.domain().events())
}

/// Reference run: event count plus the operation trace.
pub fn trace(workload: &WorkloadSpec, target: &Target) -> Result<(u64, OpTrace)> {
    let ops = check_reference(target, workload)?;
    let (pool, ex) = execute(target, &ops, PersistDomain::new(target.pool.size), false)?;
    Ok((pool.domain().events(), ex.trace))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub event_index: u64,
    pub adversary_seed: Option<u64>,
    pub pass: bool,
    pub violation_kind: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub events: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn passed(&self) -> usize {
        self.rows.iter().filter(|r| r.pass).count()
    }

    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Vec<SweepRow>> {
        csv::Reader::from_reader(r)
            .deserialize()
            .map(|row| row.map_err(csv_err))
            .collect()
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Crash at every persistence event of `workload` and validate recovery.
pub fn crash_sweep(workload: &WorkloadSpec, target: &Target, adversary: bool) -> Result<SweepReport> {
    let ops = check_reference(target, workload)?;
    let size = target.pool.size;
    let (reference, ex) = execute(target, &ops, PersistDomain::new(size), true)?;
    let events = reference.domain().events();
    drop(reference);
    let seeds: Vec<Option<u64>> = if adversary {
        (0..ADVERSARY_SEEDS).map(Some).collect()
    } else {
        vec![None]
    };
    let mut report = SweepReport {
        events,
        rows: Vec::new(),
    };
    for k in 0..=events {
        let domain = PersistDomain::new(size);
        domain.arm(k)?;
        let (pool, _) = execute(target, &ops, domain, false)?;
        if pool.domain().events() != events {
            return Err(Error::Backend("workload is not deterministic".into()));
        }
        for &seed in &seeds {
            let mut plan = CrashPlan::at(k);
            if let Some(s) = seed {
                plan = plan.with_adversary(s);
            }
            let image = pool.domain().materialize_crash(&plan)?;
            let violation = check_crash(target, &ex, k, image, seed.is_some());
            report.rows.push(SweepRow {
                event_index: k,
                adversary_seed: seed,
                pass: violation.is_none(),
                violation_kind: violation.unwrap_or_default(),
            });
        }
    }
    Ok(report)
}

fn check_crash(target: &Target, ex: &Execution, k: u64, image: PoolImage, adversary: bool) -> Option<String> {
    let pool = match Pool::open_image(image) {
        Ok(p) => p,
        Err(Error::Corruption(_)) if k < ex.pool_ready => return None,
        Err(e) => return Some(format!("open: {e}")),
    };
    check_recovered(target, ex, k, &pool, adversary).err()
}

fn check_recovered(
    target: &Target,
    ex: &Execution,
    k: u64,
    pool: &Pool,
    adversary: bool,
) -> std::result::Result<(), String> {
    let once = pool.domain().durable_image().map_err(|e| e.to_string())?;
    pool.recover().map_err(|e| format!("second recovery: {e}"))?;
    if pool.domain().durable_image().map_err(|e| e.to_string())? != once {
        return Err("recovery-not-idempotent".into());
    }
    // None stands for "structure not created yet"
    let j = ex.acks.iter().filter(|&&a| a <= k).count();
    let mut allowed = vec![j.checked_sub(1)];
    if adversary && j < ex.states.len() {
        allowed.push(Some(j));
    }
    let present = ds::exists(pool, target.ds).map_err(|e| format!("root: {e}"))?;
    let matched = if !present {
        if !allowed.contains(&None) {
            return Err("structure-missing".into());
        }
        None
    } else {
        let s = Structure::recover(pool, target.ds, target.mode)
            .map_err(|e| format!("structure-recover: {e}"))?;
        let report = s.verify().map_err(|e| format!("verify: {e}"))?;
        if let Some(v) = report.violations.first() {
            return Err(format!("structure: {v:?}"));
        }
        let entries = s.entries().map_err(|e| format!("entries: {e}"))?;
        let hit = allowed
            .iter()
            .flatten()
            .copied()
            .find(|&i| ex.states[i] == entries);
        match hit {
            Some(i) => Some(i),
            None => return Err(format!("oracle-mismatch: {} keys", entries.len())),
        }
    };
    if target.named() && !ex.images.is_empty() {
        let idx = matched.map_or(0, |i| i + 1);
        let img = masked(
            pool.domain().durable_image().map_err(|e| e.to_string())?,
            pool.log_region_range(),
        );
        if img != ex.images[idx] {
            return Err("image-mismatch".into());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PoolLocation {
    Memory,
    File { path: PathBuf, sim: SimMode },
}

#[derive(Clone, Debug)]
pub struct MultiRunOptions {
    /// Recreate the pool before every run whose index is a multiple of
    /// this. `None` keeps one pool for all runs.
    pub reinit_every: Option<usize>,
    pub location: PoolLocation,
}

impl Default for MultiRunOptions {
    fn default() -> Self {
        MultiRunOptions {
            reinit_every: None,
            location: PoolLocation::Memory,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub run: usize,
    pub reinit: bool,
    pub threads: usize,
    pub wall_ms: f64,
    pub recovery_ms: f64,
    pub ops_attempted: u64,
    /// Operations that completed without error, reads included.
    pub ops_committed: u64,
    pub counters: PersistCounters,
    pub bytes_logged: u64,
    pub name_resolutions: u64,
    pub violations: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiRunReport {
    pub runs: Vec<RunReport>,
    pub final_entries: Vec<(i64, u64)>,
    pub oracle: Vec<(i64, u64)>,
}

impl MultiRunReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(RunReport::passed) && self.final_entries == self.oracle
    }
}

/// Run `workload.runs` sessions against one pool lineage, recovering the
/// previous session's structure each time. One-thread runs are checked by
/// exact sequential replay; concurrent runs by a per-key count of the
/// operations' reported results.
pub fn multi_run(workload: &WorkloadSpec, target: &Target, opts: &MultiRunOptions) -> Result<MultiRunReport> {
    workload.validate()?;
    let mut oracle = OracleState::default();
    let mut image: Option<PoolImage> = None;
    let mut report = MultiRunReport::default();
    for run in 0..workload.runs {
        let reinit = run == 0 || opts.reinit_every.is_some_and(|n| n > 0 && run % n == 0);
        let started = Instant::now();
        let pool = match (&opts.location, reinit) {
            (PoolLocation::Memory, true) => {
                Pool::create_in(PersistDomain::new(target.pool.size), &target.pool_options())?
            }
            (PoolLocation::Memory, false) => {
                Pool::open_image(image.take().expect("previous run image"))?
            }
            (PoolLocation::File { path, sim }, true) => {
                Pool::create(path, &target.pool_options().truncate(true), *sim)?
            }
            (PoolLocation::File { path, sim }, false) => Pool::open(path, *sim)?,
        };
        let s = if reinit {
            oracle = OracleState::default();
            Structure::create(&pool, target.ds, target.mode, target.ds_options)?
        } else {
            Structure::recover(&pool, target.ds, target.mode)?
        };
        let mut rr = RunReport {
            run,
            reinit,
            threads: workload.threads,
            recovery_ms: if reinit { 0.0 } else { ms(started) },
            ..Default::default()
        };

        let c0 = pool.domain().counters();
        let logged0 = pool.stats().bytes_logged;
        let started = Instant::now();
        let results: Vec<Vec<(Op, Result<bool>)>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workload.threads)
                .map(|t| {
                    let s = &s;
                    let ops = workload.thread_ops(run, t);
                    sc.spawn(move || {
                        let mut out = Vec::with_capacity(ops.len());
                        for op in ops {
                            let r = apply(s, &op);
                            let failed = r.is_err();
                            out.push((op, r));
                            if failed {
                                break;
                            }
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        if target.named() {
            if let Err(e) = pool.checkpoint() {
                rr.violations.push(format!("checkpoint: {e}"));
            }
        }
        rr.wall_ms = ms(started);
        rr.counters = pool.domain().counters().since(&c0);
        rr.bytes_logged = pool.stats().bytes_logged - logged0;

        rr.ops_attempted = (workload.threads * workload.ops_per_thread) as u64;
        for (op, r) in results.iter().flatten() {
            match r {
                Ok(_) => rr.ops_committed += 1,
                Err(e) => rr.violations.push(format!("{} {}: {e}", op.kind, op.key)),
            }
        }
        let actual = s.entries()?;
        if workload.threads == 1 {
            for (i, (op, r)) in results[0].iter().enumerate() {
                if let Ok(got) = r {
                    let want = oracle.apply(op);
                    if *got != want {
                        rr.violations
                            .push(format!("op {i} {} {}: got {got}, expected {want}", op.kind, op.key));
                    }
                }
            }
        } else {
            check_concurrent(&mut oracle, &results, &actual, &mut rr.violations);
        }
        if actual != oracle.entries() {
            rr.violations.push("final state differs from oracle".into());
        }
        let verify = s.verify()?;
        rr.violations
            .extend(verify.violations.iter().map(|v| format!("structure: {v:?}")));
        drop(s);
        rr.name_resolutions = pool.stats().name_resolutions;
        image = pool.close()?;
        report.final_entries = actual;
        report.runs.push(rr);
    }
    report.oracle = oracle.entries();
    Ok(report)
}

/// Per key: presence before the run plus successful inserts minus
/// successful deletes must be 0 or 1 and match the final structure; a
/// surviving value must come from one of the successful inserts (or be the
/// old value when none succeeded).
fn check_concurrent(
    oracle: &mut OracleState,
    results: &[Vec<(Op, Result<bool>)>],
    actual: &[(i64, u64)],
    violations: &mut Vec<String>,
) {
    let mut adds: HashMap<i64, Vec<u64>> = HashMap::new();
    let mut removes: HashMap<i64, i64> = HashMap::new();
    for (op, r) in results.iter().flatten() {
        match (op.kind, r) {
            (OpKind::Insert, Ok(true)) => adds.entry(op.key).or_default().push(op.value),
            (OpKind::Delete, Ok(true)) => *removes.entry(op.key).or_default() += 1,
            _ => {}
        }
    }
    let actual: BTreeMap<i64, u64> = actual.iter().copied().collect();
    let mut keys: Vec<i64> = adds.keys().chain(removes.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    for key in keys {
        let added = adds.get(&key).map_or(&[][..], Vec::as_slice);
        let net = oracle.0.contains_key(&key) as i64 + added.len() as i64
            - removes.get(&key).copied().unwrap_or(0);
        if !(0..=1).contains(&net) {
            violations.push(format!("key {key}: net presence {net}"));
            continue;
        }
        match (net, actual.get(&key)) {
            (0, None) => {
                oracle.0.remove(&key);
            }
            (1, Some(&v)) => {
                let ok = if added.is_empty() {
                    oracle.0.get(&key) == Some(&v)
                } else {
                    added.contains(&v)
                };
                if !ok {
                    violations.push(format!("key {key}: value {v} never inserted"));
                }
                oracle.0.insert(key, v);
            }
            (_, got) => violations.push(format!("key {key}: expected presence {net}, found {got:?}")),
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_semantics() {
        let mut o = OracleState::default();
        let op = |kind, key| Op { kind, key, value: 9 };
        assert!(o.apply(&op(OpKind::Insert, 1)));
        assert!(!o.apply(&op(OpKind::Insert, 1)));
        assert!(o.apply(&op(OpKind::Find, 1)));
        assert!(o.apply(&op(OpKind::Delete, 1)));
        assert!(!o.apply(&op(OpKind::Delete, 1)));
        assert!(o.entries().is_empty());
    }

    #[test]
    fn trace_marks_acks() {
        let target = Target::new(Backend::Redo, DsKind::Set, Mode::Coarse);
        let (events, trace) = trace(&WorkloadSpec::single(10, 3), &target).unwrap();
        assert!(events > 0);
        for e in &trace.0 {
            assert_eq!(e.acked, e.ack_event.is_some());
            let mutating = e.result && e.kind != OpKind::Find;
            assert_eq!(e.acked, mutating, "{e:?}");
        }
    }

    #[test]
    fn direct_mode_is_refused() {
        let mut target = Target::new(Backend::Redo, DsKind::Set, Mode::Coarse);
        target.sim = SimMode::Direct;
        assert!(matches!(
            enumerate_events(&WorkloadSpec::single(1, 0), &target),
            Err(Error::DirectMode)
        ));
    }

    #[test]
    fn small_sweeps_pass() {
        for backend in Backend::ALL {
            let target = Target::new(backend, DsKind::Set, Mode::Fine);
            let rep = crash_sweep(&WorkloadSpec::single(3, 1), &target, true).unwrap();
            let bad: Vec<_> = rep.failures().take(3).collect();
            assert!(bad.is_empty(), "{backend}: {bad:?}");
        }
    }

    #[test]
    fn sweep_csv_round_trip() {
        let rep = SweepReport {
            events: 1,
            rows: vec![
                SweepRow {
                    event_index: 0,
                    adversary_seed: None,
                    pass: true,
                    violation_kind: String::new(),
                },
                SweepRow {
                    event_index: 1,
                    adversary_seed: Some(4),
                    pass: false,
                    violation_kind: "oracle-mismatch: 2 keys".into(),
                },
            ],
        };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("event_index,adversary_seed,pass,violation_kind\n"));
        assert_eq!(SweepReport::read_csv(&buf[..]).unwrap(), rep.rows);
    }

    #[test]
    fn multi_run_single_thread() {
        for backend in Backend::ALL {
            let target = Target::new(backend, DsKind::HtClosed, Mode::Coarse);
            let spec = WorkloadSpec {
                ops_per_thread: 30,
                runs: 3,
                key_hi: 64,
                ..Default::default()
            };
            let rep = multi_run(&spec, &target, &MultiRunOptions::default()).unwrap();
            assert!(rep.passed(), "{backend}: {:?}", rep.runs);
            assert!(!rep.runs[1].reinit);
        }
    }
}
