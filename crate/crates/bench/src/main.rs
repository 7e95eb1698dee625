use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use pmkit::bench::{emit_stats, run_bench, write_stats};
use pmkit::ds::{DsKind, DsOptions, Mode};
use pmkit::harness::{MultiRunOptions, PoolLocation, Target};
use pmkit::workload::{Mix, WorkloadSpec};
use pmkit::{Backend, PoolOptions, SimMode};

/// Run the set / hash-table workload against one backend and emit one CSV
/// row per run.
#[derive(Parser, Debug)]
#[command(name = "pmkit-bench", version)]
struct Args {
    #[arg(long, default_value = "redo")]
    backend: Backend,
    #[arg(long, default_value = "set")]
    ds: DsKind,
    #[arg(long, default_value = "coarse")]
    mode: Mode,
    /// Comma-separated thread counts; each gets its own set of runs.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    threads: Vec<usize>,
    /// Operations per thread.
    #[arg(long, default_value_t = 1000)]
    ops: usize,
    #[arg(long, default_value = "50:40:10")]
    mix: Mix,
    /// Runs per thread count [default: 2 for set, 10 for hash tables]
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Pool file. Without it the pool lives in memory (simulate only).
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = 32 << 20)]
    pool_size: u64,
    #[arg(long, default_value = "simulate")]
    sim: SimMode,
    /// CSV output; rows go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append to --out instead of replacing it.
    #[arg(long)]
    append: bool,
    /// Keys are drawn from [0, keys).
    #[arg(long, default_value_t = 1024)]
    keys: i64,
    /// Recreate the pool every N runs (0 never).
    #[arg(long, default_value_t = 2)]
    reinit_every: usize,
    #[arg(long, default_value_t = 4096)]
    snapshot_unit: u64,
    #[arg(long, default_value_t = 64)]
    log_slots: u32,
    #[arg(long, default_value_t = 64 << 10)]
    log_slot_size: u64,
    #[arg(long, default_value_t = 16)]
    buckets: u32,
    #[arg(long, default_value_t = 1024)]
    capacity: u64,
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Args) -> anyhow::Result<bool> {
    if args.pool.is_none() && args.sim == SimMode::Direct {
        bail!("--sim direct needs a --pool file");
    }
    let runs = args
        .runs
        .unwrap_or(if args.ds == DsKind::Set { 2 } else { 10 });
    let target = Target {
        backend: args.backend,
        ds: args.ds,
        mode: args.mode,
        pool: PoolOptions::new(args.backend, args.pool_size)
            .log_slots(args.log_slots, args.log_slot_size)
            .snapshot_unit(args.snapshot_unit),
        ds_options: DsOptions {
            buckets: args.buckets,
            capacity: args.capacity,
        },
        checkpoint_every: 0,
        sim: args.sim,
    };
    let opts = MultiRunOptions {
        reinit_every: (args.reinit_every > 0).then_some(args.reinit_every),
        location: match &args.pool {
            Some(path) => PoolLocation::File {
                path: path.clone(),
                sim: args.sim,
            },
            None => PoolLocation::Memory,
        },
    };
    let mut all_ok = true;
    for (i, &threads) in args.threads.iter().enumerate() {
        let spec = WorkloadSpec {
            threads,
            ops_per_thread: args.ops,
            mix: args.mix,
            key_lo: 0,
            key_hi: args.keys,
            seed: args.seed,
            runs,
        };
        let rows = run_bench(&spec, &target, &opts)
            .with_context(|| format!("{threads} threads"))?;
        for r in rows.iter().filter(|r| !r.ok()) {
            eprintln!("threads={threads} run={}: {}", r.run, r.status);
        }
        all_ok &= rows.iter().all(|r| r.ok());
        match &args.out {
            Some(path) => emit_stats(&rows, path, args.append || i > 0)
                .with_context(|| format!("writing {}", path.display()))?,
            None => write_stats(&rows, std::io::stdout().lock(), i == 0)?,
        }
    }
    Ok(all_ok)
}
