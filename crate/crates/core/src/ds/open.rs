//! Open-addressed hash table in one contiguous allocation.
//!
//! Payload: `kind u64, capacity u64, live u64, tombstones u64`, then
//! `capacity` slots of `state u64, key i64, value u64`. Linear probing from
//! `key mod capacity`; removal leaves a tombstone.

use parking_lot::Mutex;

use super::{check_key, LockRegistry, Mode, VerificationReport, Violation, KIND_HT_OPEN};
use crate::error::{Error, Result};
use crate::pheap::{Backend, PRef, Pool};
use crate::txn::{Transaction, TxMem};

const HEADER: u64 = 32;
const SLOT: u64 = 24;
const EMPTY: u64 = 0;
const LIVE: u64 = 1;
const TOMB: u64 = 2;
const NAME: &str = "ht";

pub struct OpenTable<'p> {
    pool: &'p Pool,
    table: PRef,
    capacity: u64,
    lock: Mutex<()>,
    locks: LockRegistry,
}

enum Probe {
    Found(u64),
    Vacant(u64),
    Full,
}

impl<'p> OpenTable<'p> {
    pub fn create(pool: &'p Pool, mode: Mode, capacity: u64) -> Result<Self> {
        if mode == Mode::Fine {
            return Err(Error::Config("the open-addressed table only supports coarse locking".into()));
        }
        if capacity < 2 {
            return Err(Error::Config("table capacity must be at least 2".into()));
        }
        if super::exists(pool, super::DsKind::HtOpen)? {
            return Err(Error::Precondition("pool already holds a structure"));
        }
        let size = HEADER + capacity * SLOT;
        let mut tx = pool.begin()?;
        let table = if pool.backend() == Backend::Named {
            tx.nv_alloc(NAME, size)?
        } else {
            let t = tx.alloc(size)?;
            tx.set_root(t)?;
            t
        };
        tx.write_u64(table.payload(), KIND_HT_OPEN)?;
        tx.write_u64(table.payload() + 8, capacity)?;
        tx.commit()?;
        if pool.backend() == Backend::Named {
            pool.checkpoint()?;
        }
        Ok(Self::shell(pool, table, capacity))
    }

    fn shell(pool: &'p Pool, table: PRef, capacity: u64) -> Self {
        OpenTable {
            pool,
            table,
            capacity,
            lock: Mutex::new(()),
            locks: LockRegistry::new(),
        }
    }

    pub fn recover(pool: &'p Pool, mode: Mode) -> Result<Self> {
        if mode == Mode::Fine {
            return Err(Error::Config("the open-addressed table only supports coarse locking".into()));
        }
        let table = if pool.backend() == Backend::Named {
            pool.nv_lookup_quiet(NAME)?
                .ok_or(Error::Precondition("pool holds no structure"))?
        } else {
            let r = pool.get_root()?;
            if r.is_null() {
                return Err(Error::Precondition("pool holds no structure"));
            }
            r
        };
        let size = pool
            .live_block(table)?
            .ok_or_else(|| Error::Corruption(format!("table {table} is not a live block")))?
            .size;
        let kind = pool.read_u64(table.payload())?;
        if kind != KIND_HT_OPEN {
            return Err(Error::Config(format!(
                "pool holds structure kind {kind}, expected {KIND_HT_OPEN}"
            )));
        }
        let capacity = pool.read_u64(table.payload() + 8)?;
        if capacity < 2 || HEADER + capacity.saturating_mul(SLOT) > size {
            return Err(Error::Corruption(format!("table capacity {capacity} does not fit")));
        }
        let t = Self::shell(pool, table, capacity);
        if let Some(v) = t.verify_table()?.violations.first() {
            return Err(Error::Corruption(format!("table damaged: {v:?}")));
        }
        Ok(t)
    }

    pub fn pool(&self) -> &'p Pool {
        self.pool
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Largest number of live keys the table accepts.
    pub fn max_live(&self) -> u64 {
        self.capacity * 3 / 4
    }

    fn slot_addr(&self, i: u64) -> u64 {
        self.table.payload() + HEADER + i * SLOT
    }

    fn field(&self, at: u64) -> Result<u64> {
        self.pool.read_u64(self.table.payload() + at)
    }

    fn slot(&self, i: u64) -> Result<(u64, i64, u64)> {
        let mut b = [0u8; SLOT as usize];
        self.pool.read(self.slot_addr(i), &mut b)?;
        let u = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        Ok((u(0), u(8) as i64, u(16)))
    }

    fn probe(&self, key: i64) -> Result<Probe> {
        let start = key.rem_euclid(self.capacity as i64) as u64;
        let mut vacant = None;
        for step in 0..self.capacity {
            let i = (start + step) % self.capacity;
            let (state, k, _) = self.slot(i)?;
            match state {
                LIVE if k == key => return Ok(Probe::Found(i)),
                EMPTY => return Ok(Probe::Vacant(vacant.unwrap_or(i))),
                TOMB if vacant.is_none() => vacant = Some(i),
                _ => {}
            }
        }
        Ok(vacant.map_or(Probe::Full, Probe::Vacant))
    }

    pub fn add(&self, key: i64, value: u64) -> Result<bool> {
        check_key(key)?;
        let _g = self.lock.lock();
        let slot = match self.probe(key)? {
            Probe::Found(_) => return Ok(false),
            Probe::Full => return Err(Error::TableFull),
            Probe::Vacant(i) => i,
        };
        let live = self.field(16)?;
        if live >= self.max_live() {
            return Err(Error::TableFull);
        }
        let reused = self.slot(slot)?.0 == TOMB;
        let mut buf = [0u8; SLOT as usize];
        buf[0..8].copy_from_slice(&LIVE.to_le_bytes());
        buf[8..16].copy_from_slice(&key.to_le_bytes());
        buf[16..24].copy_from_slice(&value.to_le_bytes());
        let mut tx = self.pool.begin()?;
        tx.write(self.slot_addr(slot), &buf)?;
        tx.write_u64(self.table.payload() + 16, live + 1)?;
        if reused {
            let tombs = self.field(24)?;
            tx.write_u64(self.table.payload() + 24, tombs - 1)?;
        }
        tx.commit()?;
        Ok(true)
    }

    pub fn remove(&self, key: i64) -> Result<bool> {
        check_key(key)?;
        let _g = self.lock.lock();
        let Probe::Found(slot) = self.probe(key)? else {
            return Ok(false);
        };
        let live = self.field(16)?;
        let tombs = self.field(24)?;
        let mut tx = self.pool.begin()?;
        tx.write_u64(self.slot_addr(slot), TOMB)?;
        tx.write_u64(self.table.payload() + 16, live - 1)?;
        tx.write_u64(self.table.payload() + 24, tombs + 1)?;
        tx.commit()?;
        Ok(true)
    }

    pub fn contains(&self, key: i64) -> Result<bool> {
        check_key(key)?;
        let _g = self.lock.lock();
        Ok(matches!(self.probe(key)?, Probe::Found(_)))
    }

    pub fn entries(&self) -> Result<Vec<(i64, u64)>> {
        let mut out = Vec::new();
        for i in 0..self.capacity {
            let (state, k, v) = self.slot(i)?;
            if state == LIVE {
                out.push((k, v));
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    fn verify_table(&self) -> Result<VerificationReport> {
        let mut report = VerificationReport::default();
        let (mut live, mut tombs) = (0, 0);
        let mut keys = std::collections::HashSet::new();
        for i in 0..self.capacity {
            let (state, k, _) = self.slot(i)?;
            match state {
                EMPTY => {}
                TOMB => tombs += 1,
                LIVE => {
                    live += 1;
                    let misplaced = !keys.insert(k)
                        || k == i64::MIN
                        || k == i64::MAX
                        || !matches!(self.probe(k)?, Probe::Found(j) if j == i);
                    if misplaced {
                        report.push(Violation::BadSlot { slot: i });
                    }
                }
                _ => report.push(Violation::BadSlot { slot: i }),
            }
        }
        for (field, at, actual) in [("live", 16, live), ("tombstones", 24, tombs)] {
            let stored = self.field(at)?;
            if stored != actual {
                report.push(Violation::CountMismatch { field, stored, actual });
            }
        }
        report.entries = live;
        Ok(report)
    }

    pub fn verify(&self) -> Result<VerificationReport> {
        let mut report = self.verify_table()?;
        let audit = self.pool.audit_heap()?;
        let expected = 3 + (self.pool.backend() == Backend::Named) as u64;
        if audit.live_blocks != expected {
            report.push(Violation::Leak {
                expected,
                found: audit.live_blocks,
            });
        }
        report.violations.extend(audit.violations.into_iter().map(Violation::Heap));
        Ok(report)
    }

    pub fn node_offsets(&self) -> Result<Vec<u64>> {
        Ok(vec![self.table.offset()])
    }

    pub fn locks(&self) -> &LockRegistry {
        &self.locks
    }
}
