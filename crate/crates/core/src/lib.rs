//! Persistent-memory programming toolkit.
//!
//! Three transaction backends (byte-granularity redo log, snapshot undo log
//! and named allocations with page checkpoints) share one pool format, one
//! allocator and one simulated persistence domain. The crash harness drives
//! any workload to every persistence event and checks what recovery finds.

pub mod bench;
pub mod ds;
pub mod error;
pub mod harness;
pub mod log;
pub mod named;
pub mod persist;
pub mod pheap;
pub mod redo;
pub mod txn;
pub mod undo;
pub mod workload;

pub use error::{Error, Result};
pub use named::{CheckpointInfo, NamedTxn, NvHandle};
pub use persist::{CrashPlan, PersistCounters, PersistDomain, PoolImage, SimMode, LINE_SIZE};
pub use pheap::{
    Backend, BlockHeader, BlockState, HeapAudit, HeapViolation, PRef, Pool, PoolHeader,
    PoolOptions, PoolStats, RecoveryReport,
};
pub use redo::RedoTxn;
pub use txn::{Transaction, Tx, TxMem};
pub use undo::UndoTxn;
