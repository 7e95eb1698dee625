//! Undo-log transactions with a configurable snapshot unit.
//!
//! The first write to a snapshot unit inside a transaction copies the unit's
//! old contents into the log before the home location changes:
//!
//! 1. record store + flush + fence
//! 2. durable record count bumped, flushed, fenced
//! 3. new bytes stored in place and flushed
//!
//! A slot is `txn_id u64, count u64` followed by the records. Every record
//! below `count` is known to be whole, so a record that fails its crc there
//! is real corruption rather than a torn tail.

use std::collections::HashMap;

use parking_lot::MutexGuard;

use crate::error::{Error, Result};
use crate::log::{self, Entry, LogEngine, COMMIT_MARKER, RECORD_HEADER, TAG_UNDO};
use crate::pheap::{Pool, RecoveryReport, OFF_ROOT};
use crate::txn::{NestGuard, Transaction, TxMem};

const SLOT_HEADER: u64 = 16;

pub struct UndoTxn<'p> {
    pool: &'p Pool,
    log: &'p LogEngine,
    slot: u32,
    base: u64,
    txn_id: u64,
    unit: u64,
    cursor: u64,
    count: u64,
    chain: crc32fast::Hasher,
    snapshots: HashMap<u64, Vec<u8>>,
    written: Vec<(u64, u64)>,
    logged: u64,
    active: bool,
    alloc_guard: Option<MutexGuard<'p, ()>>,
    _nest: NestGuard,
}

impl<'p> UndoTxn<'p> {
    pub(crate) fn begin(pool: &'p Pool, log: &'p LogEngine, nest: NestGuard) -> Result<Self> {
        let slot = log.acquire_slot()?;
        let base = log.slot_base(slot);
        let txn_id = log.next_txn_id();
        let d = pool.domain();
        let mut hdr = [0u8; SLOT_HEADER as usize];
        hdr[..8].copy_from_slice(&txn_id.to_le_bytes());
        let started = d.store(base, &hdr).and_then(|_| d.flush(base, SLOT_HEADER));
        if let Err(e) = started {
            log.release_slot(slot);
            return Err(e);
        }
        Ok(UndoTxn {
            pool,
            log,
            slot,
            base,
            txn_id,
            unit: log.snapshot_unit,
            cursor: SLOT_HEADER,
            count: 0,
            chain: crc32fast::Hasher::new(),
            snapshots: HashMap::new(),
            written: Vec::new(),
            logged: 0,
            active: true,
            alloc_guard: None,
            _nest: nest,
        })
    }

    pub fn txn_id(&self) -> u64 {
        self.txn_id
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    pub fn record_count(&self) -> u64 {
        self.count
    }

    pub fn bytes_logged(&self) -> u64 {
        self.logged
    }

    fn snapshot(&mut self, unit_start: u64) -> Result<()> {
        if self.snapshots.contains_key(&unit_start) {
            return Ok(());
        }
        let d = self.pool.domain();
        // the header page is never snapshotted whole; only the root word
        // is transactional there
        let len = if unit_start == OFF_ROOT {
            8
        } else {
            self.unit.min(self.pool.size() - unit_start)
        };
        let size = RECORD_HEADER + len;
        if self.cursor + size + COMMIT_MARKER > self.log.slot_size {
            self.abort_inner()?;
            return Err(Error::OutOfLog);
        }
        let mut old = vec![0u8; len as usize];
        d.read(unit_start, &mut old)?;
        let (record, crc) = log::encode_record(TAG_UNDO, self.txn_id, unit_start, &old);
        let at = self.base + self.cursor;
        d.store(at, &record)?;
        d.flush(at, size)?;
        d.fence()?;
        self.count += 1;
        d.store(self.base + 8, &self.count.to_le_bytes())?;
        d.flush(self.base + 8, 8)?;
        d.fence()?;
        self.cursor += size;
        self.chain.update(&crc.to_le_bytes());
        self.snapshots.insert(unit_start, old);
        self.logged += size;
        self.pool.stats.logged(size);
        Ok(())
    }

    fn commit_inner(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        let d = self.pool.domain();
        d.fence()?;
        let marker = log::encode_marker(self.txn_id, self.count, self.chain.clone().finalize());
        let at = self.base + self.cursor;
        d.store(at, &marker)?;
        d.flush(at, COMMIT_MARKER)?;
        d.fence()?;
        self.pool.stats.ack(d.events());
        self.pool.stats.logged(COMMIT_MARKER);
        self.logged += COMMIT_MARKER;
        self.truncate()
    }

    fn truncate(&mut self) -> Result<()> {
        self.active = false;
        let d = self.pool.domain();
        let res = d
            .store(self.base, &[0u8; SLOT_HEADER as usize])
            .and_then(|_| d.flush(self.base, SLOT_HEADER))
            .and_then(|_| d.fence());
        self.log.release_slot(self.slot);
        self.alloc_guard = None;
        res
    }

    /// Put back exactly the bytes this transaction stored. Other parts of
    /// a snapshot unit may belong to concurrent transactions.
    fn abort_inner(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        let d = self.pool.domain();
        for &(off, len) in self.written.iter().rev() {
            let mut at = off;
            let end = off + len;
            while at < end {
                let unit_start = if at == OFF_ROOT {
                    OFF_ROOT
                } else {
                    at / self.unit * self.unit
                };
                let stop = end.min(unit_start + self.unit);
                let old = &self.snapshots[&unit_start];
                let s = (at - unit_start) as usize;
                d.store(at, &old[s..s + (stop - at) as usize])?;
                at = stop;
            }
            d.flush(off, len)?;
        }
        if !self.written.is_empty() {
            d.fence()?;
        }
        self.written.clear();
        self.truncate()
    }
}

impl TxMem for UndoTxn<'_> {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.pool.domain().read(offset, buf)
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.pool.check_target(offset, data.len() as u64)?;
        if data.is_empty() {
            return Ok(());
        }
        let end = offset + data.len() as u64;
        let mut unit_start = if offset == OFF_ROOT {
            OFF_ROOT
        } else {
            offset / self.unit * self.unit
        };
        while unit_start < end {
            self.snapshot(unit_start)?;
            unit_start += self.unit;
        }
        let d = self.pool.domain();
        d.store(offset, data)?;
        d.flush(offset, data.len() as u64)?;
        self.written.push((offset, data.len() as u64));
        Ok(())
    }
}

impl<'p> Transaction<'p> for UndoTxn<'p> {
    fn pool(&self) -> &'p Pool {
        self.pool
    }

    fn hold_allocator(&mut self) {
        if self.alloc_guard.is_none() {
            self.alloc_guard = Some(self.pool.alloc_lock());
        }
    }

    fn commit(mut self) -> Result<()> {
        self.commit_inner()
    }

    fn abort(mut self) -> Result<()> {
        self.abort_inner()
    }
}

impl Drop for UndoTxn<'_> {
    fn drop(&mut self) {
        if self.active {
            let _ = self.abort_inner();
        }
    }
}

/// Roll back every slot without a valid commit marker, newest transaction
/// first, then clear all slots.
pub fn recover(pool: &Pool) -> Result<RecoveryReport> {
    let log = pool.log_engine()?;
    let d = pool.domain();
    let mut report = RecoveryReport::default();
    let mut pending = Vec::new();
    let mut used = Vec::new();
    for slot in 0..log.slots {
        let base = log.slot_base(slot);
        let end = base + log.slot_size;
        let txn_id = d.read_u64(base)?;
        let count = d.read_u64(base + 8)?;
        if txn_id == 0 && count == 0 {
            continue;
        }
        used.push(base);
        if txn_id == 0 {
            continue;
        }
        let mut at = base + SLOT_HEADER;
        let mut chain = crc32fast::Hasher::new();
        let mut records = Vec::new();
        for i in 0..count {
            match log::read_entry(d, at, end, TAG_UNDO, txn_id, i, chain.clone().finalize())? {
                Entry::Record(r) => {
                    chain.update(&r.crc.to_le_bytes());
                    at += RECORD_HEADER + r.payload.len() as u64;
                    records.push(r);
                }
                _ => {
                    return Err(Error::Corruption(format!(
                        "undo slot {slot}: record {i} of {count} failed validation"
                    )))
                }
            }
        }
        let committed = matches!(
            log::read_entry(d, at, end, TAG_UNDO, txn_id, count, chain.finalize())?,
            Entry::Marker
        );
        if committed {
            report.committed += 1;
        } else {
            pending.push((txn_id, records));
        }
    }
    pending.sort_by_key(|p| std::cmp::Reverse(p.0));
    for (_, records) in &pending {
        for r in records.iter().rev() {
            d.store(r.target, &r.payload)?;
            d.flush(r.target, r.payload.len() as u64)?;
        }
        report.rolled_back += 1;
    }
    if !pending.is_empty() {
        d.fence()?;
    }
    if !used.is_empty() {
        for base in used {
            d.store(base, &[0u8; SLOT_HEADER as usize])?;
            d.flush(base, SLOT_HEADER)?;
        }
        d.fence()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::{CrashPlan, PersistDomain};
    use crate::pheap::{Backend, PRef, PoolOptions};
    use crate::txn::Tx;

    fn pool_with(unit: u64) -> Pool {
        let opts = PoolOptions::compact(Backend::Undo, 1 << 20).snapshot_unit(unit);
        Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap()
    }

    fn undo(pool: &Pool) -> UndoTxn<'_> {
        match pool.begin().unwrap() {
            Tx::Undo(t) => t,
            _ => unreachable!(),
        }
    }

    fn field(pool: &Pool, r: PRef) -> u64 {
        let mut b = [0u8; 8];
        pool.read_field(r, 0, &mut b).unwrap();
        u64::from_le_bytes(b)
    }

    #[test]
    fn snapshot_once_per_unit() {
        for unit in [64u64, 256, 4096] {
            let pool = pool_with(unit);
            let r = pool.p_alloc(16).unwrap();
            let before = pool.stats().bytes_logged;
            let mut t = undo(&pool);
            t.write_field(r, 0, &1u64.to_le_bytes()).unwrap();
            t.write_field(r, 8, &2u64.to_le_bytes()).unwrap();
            assert_eq!(t.record_count(), 1);
            t.commit().unwrap();
            assert_eq!(pool.stats().bytes_logged - before, 16 + unit + 24);
        }
    }

    #[test]
    fn write_spanning_two_units() {
        let pool = pool_with(64);
        let mut t = undo(&pool);
        let at = (512 << 10) + 60;
        t.write(at, &[7; 8]).unwrap();
        assert_eq!(t.record_count(), 2);
        t.abort().unwrap();
        let mut b = [1u8; 8];
        pool.read(at, &mut b).unwrap();
        assert_eq!(b, [0; 8]);
    }

    #[test]
    fn abort_keeps_other_bytes_of_the_unit() {
        let pool = pool_with(4096);
        let a = pool.p_alloc(16).unwrap();
        let b = pool.p_alloc(16).unwrap();
        let mut t = undo(&pool);
        t.write_field(a, 0, &5u64.to_le_bytes()).unwrap();
        // a concurrent writer lands in the same unit after the snapshot
        pool.domain().store(b.payload(), &9u64.to_le_bytes()).unwrap();
        t.abort().unwrap();
        assert_eq!(field(&pool, a), 0);
        assert_eq!(field(&pool, b), 9);
    }

    #[test]
    fn root_word_snapshot_is_eight_bytes() {
        let pool = pool_with(4096);
        let r = pool.p_alloc(16).unwrap();
        let before = pool.stats().bytes_logged;
        let mut t = undo(&pool);
        t.set_root(r).unwrap();
        assert_eq!(t.bytes_logged(), 16 + 8);
        drop(t);
        assert!(pool.get_root().unwrap().is_null());
        let mut t = undo(&pool);
        t.set_root(r).unwrap();
        t.commit().unwrap();
        assert_eq!(pool.stats().bytes_logged - before, 2 * 24 + 24);
        assert_eq!(pool.get_root().unwrap(), r);
    }

    #[test]
    fn drop_aborts() {
        let pool = pool_with(256);
        let r = pool.p_alloc(16).unwrap();
        {
            let mut t = undo(&pool);
            t.write_field(r, 0, &3u64.to_le_bytes()).unwrap();
        }
        assert_eq!(field(&pool, r), 0);
        assert!(pool.begin().is_ok());
    }

    #[test]
    fn out_of_log_aborts() {
        let opts = PoolOptions::compact(Backend::Undo, 1 << 20)
            .log_slots(2, 8192)
            .snapshot_unit(4096);
        let pool = Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap();
        let mut t = undo(&pool);
        t.write(256 << 10, &[1]).unwrap();
        assert!(matches!(t.write((256 << 10) + 4096, &[1]), Err(Error::OutOfLog)));
        drop(t);
        let mut b = [0u8; 1];
        pool.read(256 << 10, &mut b).unwrap();
        assert_eq!(b[0], 0);
    }

    fn one_write(domain: PersistDomain) -> (Pool, PRef, u64, u64) {
        let opts = PoolOptions::compact(Backend::Undo, 1 << 20).snapshot_unit(64);
        let pool = Pool::create_in(domain, &opts).unwrap();
        let r = pool.p_alloc(16).unwrap();
        let start = pool.domain().events();
        let mut t = undo(&pool);
        t.write_field(r, 0, &7u64.to_le_bytes()).unwrap();
        t.write_field(r, 8, &8u64.to_le_bytes()).unwrap();
        t.commit().unwrap();
        let ack = pool.stats().last_ack_event;
        (pool, r, start, ack)
    }

    #[test]
    fn crash_sweep_over_one_commit() {
        let (pool, r, start, ack) = one_write(PersistDomain::new(1 << 20));
        let end = pool.domain().events();
        for k in start..=end {
            for adversary in [None, Some(0), Some(1), Some(2)] {
                let d = PersistDomain::new(1 << 20);
                d.arm(k).unwrap();
                let (pool, ..) = one_write(d);
                let mut plan = CrashPlan::at(k);
                if let Some(seed) = adversary {
                    plan = plan.with_adversary(seed);
                }
                let img = pool.domain().materialize_crash(&plan).unwrap();
                let rec = Pool::open_image(img).unwrap();
                let mut b = [0u8; 16];
                rec.read_field(r, 0, &mut b).unwrap();
                let got = (
                    u64::from_le_bytes(b[..8].try_into().unwrap()),
                    u64::from_le_bytes(b[8..].try_into().unwrap()),
                );
                if k >= ack {
                    assert_eq!(got, (7, 8), "k={k}");
                } else if adversary.is_none() {
                    assert_eq!(got, (0, 0), "k={k}");
                } else {
                    // the marker may already be durable one event early
                    assert!(got == (0, 0) || got == (7, 8), "k={k} {adversary:?} {got:?}");
                }
                let once = rec.domain().durable_image().unwrap();
                let again = rec.recover().unwrap();
                assert_eq!((again.rolled_back, again.committed), (0, 0));
                assert_eq!(rec.domain().durable_image().unwrap(), once);
                assert!(rec.audit_heap().unwrap().is_clean());
            }
        }
    }

    #[test]
    fn damaged_counted_record_is_corruption() {
        let d = PersistDomain::new(1 << 20);
        let opts = PoolOptions::compact(Backend::Undo, 1 << 20).snapshot_unit(64);
        let pool = Pool::create_in(d, &opts).unwrap();
        let r = pool.p_alloc(16).unwrap();
        let mut t = undo(&pool);
        t.write_field(r, 0, &7u64.to_le_bytes()).unwrap();
        let base = t.base;
        let mut img = pool.domain().durable_image().unwrap();
        std::mem::forget(t);
        let at = (base + SLOT_HEADER + RECORD_HEADER) as usize;
        img.as_mut_slice()[at] ^= 0xFF;
        assert!(matches!(Pool::open_image(img), Err(Error::Corruption(_))));
    }
}
