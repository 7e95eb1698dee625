//! Persistent data structures built on the pool: a sorted-list set, a
//! chained hash table of such lists, and an open-addressed hash table.
//!
//! Redo and undo pools anchor a structure at the pool root. Named pools
//! anchor it under the reserved names `"set"` or `"ht"` and name every node
//! `node-<id>`. Locks are never stored in the pool; each session builds a
//! fresh [`LockRegistry`].

mod list;
mod open;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::{ArcMutexGuard, Mutex, RawMutex};

use crate::error::{Error, Result};
use crate::pheap::{HeapViolation, Pool};

pub use list::{ChainedTable, SortedSet};
pub use open::OpenTable;

pub const KIND_SET: u64 = 1;
pub const KIND_HT_CLOSED: u64 = 2;
pub const KIND_HT_OPEN: u64 = 3;

pub const DEFAULT_BUCKETS: u32 = 16;
pub const DEFAULT_CAPACITY: u64 = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Coarse,
    Fine,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Coarse => "coarse",
            Mode::Fine => "fine",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Mode::Coarse),
            "fine" => Ok(Mode::Fine),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DsKind {
    Set,
    HtClosed,
    HtOpen,
}

impl DsKind {
    pub const ALL: [DsKind; 3] = [DsKind::Set, DsKind::HtClosed, DsKind::HtOpen];

    pub fn as_str(self) -> &'static str {
        match self {
            DsKind::Set => "set",
            DsKind::HtClosed => "ht-closed",
            DsKind::HtOpen => "ht-open",
        }
    }
}

impl fmt::Display for DsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set" => Ok(DsKind::Set),
            "ht-closed" => Ok(DsKind::HtClosed),
            "ht-open" => Ok(DsKind::HtOpen),
            other => Err(Error::Config(format!("unknown data structure {other:?}"))),
        }
    }
}

/// Shape parameters fixed when a structure is created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DsOptions {
    pub buckets: u32,
    pub capacity: u64,
}

impl Default for DsOptions {
    fn default() -> Self {
        DsOptions {
            buckets: DEFAULT_BUCKETS,
            capacity: DEFAULT_CAPACITY,
        }
    }
}

/// Session-local node locks, created on first use.
#[derive(Default)]
pub struct LockRegistry {
    locks: Mutex<HashMap<u64, Arc<Mutex<()>>>>,
}

pub type NodeGuard = ArcMutexGuard<RawMutex, ()>;

impl LockRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&self, offset: u64) -> Arc<Mutex<()>> {
        self.locks.lock().entry(offset).or_default().clone()
    }

    pub fn lock(&self, offset: u64) -> NodeGuard {
        self.entry(offset).lock_arc()
    }

    pub fn try_lock(&self, offset: u64) -> Option<NodeGuard> {
        self.entry(offset).try_lock_arc()
    }

    /// Number of locks created so far.
    pub fn len(&self) -> usize {
        self.locks.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingRoot,
    BadRoot(String),
    BadSentinel { bucket: u32, offset: u64 },
    Unsorted { bucket: u32, offset: u64 },
    WrongBucket { bucket: u32, key: i64 },
    Dangling { bucket: u32, from: u64, to: u64 },
    Cycle { bucket: u32 },
    TailUnreachable { bucket: u32 },
    BadSlot { slot: u64 },
    CountMismatch { field: &'static str, stored: u64, actual: u64 },
    Leak { expected: u64, found: u64 },
    Heap(HeapViolation),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerificationReport {
    pub entries: u64,
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub(crate) fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }
}

fn check_key(key: i64) -> Result<()> {
    if key == i64::MIN || key == i64::MAX {
        return Err(Error::Precondition("key must lie strictly between the sentinels"));
    }
    Ok(())
}

/// Any of the three structures, picked at run time.
pub enum Structure<'p> {
    Set(SortedSet<'p>),
    Chained(ChainedTable<'p>),
    Open(OpenTable<'p>),
}

macro_rules! each {
    ($self:expr, $s:ident => $body:expr) => {
        match $self {
            Structure::Set($s) => $body,
            Structure::Chained($s) => $body,
            Structure::Open($s) => $body,
        }
    };
}

impl<'p> Structure<'p> {
    pub fn create(pool: &'p Pool, kind: DsKind, mode: Mode, opts: DsOptions) -> Result<Self> {
        Ok(match kind {
            DsKind::Set => Structure::Set(SortedSet::create(pool, mode)?),
            DsKind::HtClosed => Structure::Chained(ChainedTable::create(pool, mode, opts.buckets)?),
            DsKind::HtOpen => Structure::Open(OpenTable::create(pool, mode, opts.capacity)?),
        })
    }

    pub fn recover(pool: &'p Pool, kind: DsKind, mode: Mode) -> Result<Self> {
        Ok(match kind {
            DsKind::Set => Structure::Set(SortedSet::recover(pool, mode)?),
            DsKind::HtClosed => Structure::Chained(ChainedTable::recover(pool, mode)?),
            DsKind::HtOpen => Structure::Open(OpenTable::recover(pool, mode)?),
        })
    }

    /// Recover if the pool already holds a structure, otherwise create one.
    pub fn open_or_create(pool: &'p Pool, kind: DsKind, mode: Mode, opts: DsOptions) -> Result<Self> {
        if exists(pool, kind)? {
            Self::recover(pool, kind, mode)
        } else {
            Self::create(pool, kind, mode, opts)
        }
    }

    pub fn kind(&self) -> DsKind {
        match self {
            Structure::Set(_) => DsKind::Set,
            Structure::Chained(_) => DsKind::HtClosed,
            Structure::Open(_) => DsKind::HtOpen,
        }
    }

    pub fn pool(&self) -> &'p Pool {
        each!(self, s => s.pool())
    }

    pub fn add(&self, key: i64, value: u64) -> Result<bool> {
        each!(self, s => s.add(key, value))
    }

    pub fn remove(&self, key: i64) -> Result<bool> {
        each!(self, s => s.remove(key))
    }

    pub fn contains(&self, key: i64) -> Result<bool> {
        each!(self, s => s.contains(key))
    }

    /// Sorted `(key, value)` pairs. Call at quiescence.
    pub fn entries(&self) -> Result<Vec<(i64, u64)>> {
        each!(self, s => s.entries())
    }

    pub fn verify(&self) -> Result<VerificationReport> {
        each!(self, s => s.verify())
    }

    /// Offsets of every block the structure owns (nodes or table).
    pub fn node_offsets(&self) -> Result<Vec<u64>> {
        each!(self, s => s.node_offsets())
    }

    pub fn locks(&self) -> &LockRegistry {
        each!(self, s => s.locks())
    }
}

/// Whether `pool` already anchors a structure of `kind`.
pub fn exists(pool: &Pool, kind: DsKind) -> Result<bool> {
    match pool.backend() {
        crate::pheap::Backend::Named => {
            let name = if kind == DsKind::Set { "set" } else { "ht" };
            Ok(pool.nv_lookup_quiet(name)?.is_some())
        }
        _ => Ok(!pool.get_root()?.is_null()),
    }
}
