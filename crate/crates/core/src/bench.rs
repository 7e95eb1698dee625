//! Benchmark rows on top of the multi-run protocol.

use std::fs::OpenOptions;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{self, csv_err, MultiRunOptions, PoolLocation, Target};
use crate::workload::WorkloadSpec;

/// One run of one configuration. Column order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub run: usize,
    pub backend: String,
    pub ds: String,
    pub mode: String,
    pub wall_ms: f64,
    pub ops_committed: u64,
    pub flush_calls: u64,
    pub fence_calls: u64,
    pub bytes_flushed: u64,
    pub bytes_logged: u64,
    pub recovery_ms: f64,
    pub name_resolutions: u64,
    pub sim: String,
    pub threads: usize,
    pub status: String,
}

impl StatsRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn blank(target: &Target, opts: &MultiRunOptions, threads: usize) -> Self {
        let sim = match &opts.location {
            PoolLocation::Memory => target.sim,
            PoolLocation::File { sim, .. } => *sim,
        };
        StatsRow {
            run: 0,
            backend: target.backend.to_string(),
            ds: target.ds.to_string(),
            mode: target.mode.to_string(),
            wall_ms: 0.0,
            ops_committed: 0,
            flush_calls: 0,
            fence_calls: 0,
            bytes_flushed: 0,
            bytes_logged: 0,
            recovery_ms: 0.0,
            name_resolutions: 0,
            sim: sim.as_str().to_string(),
            threads,
            status: "ok".into(),
        }
    }
}

/// Run the multi-run protocol and report one row per run. Configuration
/// errors are returned; anything else (out of space, a failed check)
/// becomes a row whose status is not `ok`.
pub fn run_bench(spec: &WorkloadSpec, target: &Target, opts: &MultiRunOptions) -> Result<Vec<StatsRow>> {
    spec.validate()?;
    let report = match harness::multi_run(spec, target, opts) {
        Ok(r) => r,
        Err(e @ (Error::Config(_) | Error::DirectMode)) => return Err(e),
        Err(e) => {
            let mut row = StatsRow::blank(target, opts, spec.threads);
            row.status = format!("error: {e}");
            return Ok(vec![row]);
        }
    };
    let last = report.runs.len().saturating_sub(1);
    let final_ok = report.final_entries == report.oracle;
    Ok(report
        .runs
        .iter()
        .map(|r| {
            let mut row = StatsRow::blank(target, opts, r.threads);
            row.run = r.run;
            row.wall_ms = r.wall_ms;
            row.ops_committed = r.ops_committed;
            row.flush_calls = r.counters.flush_calls;
            row.fence_calls = r.counters.fence_calls;
            row.bytes_flushed = r.counters.bytes_flushed;
            row.bytes_logged = r.bytes_logged;
            row.recovery_ms = r.recovery_ms;
            row.name_resolutions = r.name_resolutions;
            if let Some(v) = r.violations.first() {
                row.status = format!("fail: {v}");
            } else if r.run == last && !final_ok {
                row.status = "fail: final state differs from oracle".into();
            }
            row
        })
        .collect())
}

/// Write `rows` as CSV with a header. With `append` set and a non-empty
/// file already present, rows are added without repeating the header.
pub fn emit_stats(rows: &[StatsRow], path: &Path, append: bool) -> Result<()> {
    let has_data = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    write_stats(rows, file, !has_data)
}

pub fn write_stats<W: io::Write>(rows: &[StatsRow], w: W, header: bool) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        out.write_record(HEADER).map_err(csv_err)?;
    }
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub const HEADER: [&str; 15] = [
    "run",
    "backend",
    "ds",
    "mode",
    "wall_ms",
    "ops_committed",
    "flush_calls",
    "fence_calls",
    "bytes_flushed",
    "bytes_logged",
    "recovery_ms",
    "name_resolutions",
    "sim",
    "threads",
    "status",
];

pub fn read_stats(path: &Path) -> Result<Vec<StatsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
