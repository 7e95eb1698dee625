//! Byte-granularity redo-log transactions.
//!
//! Each write is appended to the thread's log slot and flushed; the new
//! bytes stay in the transaction's private write set, which reads inside the
//! transaction see. Commit runs:
//!
//! 1. fence (slot header and records durable)
//! 2. commit marker store + flush + fence, the acknowledgment point
//! 3. write set applied to home locations, flushed, fenced
//! 4. slot header cleared, flushed, fenced
//!
//! Home locations are never touched before the marker is durable, so
//! recovery only has to replay slots that end in a valid marker.

use parking_lot::MutexGuard;

use crate::error::{Error, Result};
use crate::log::{self, Entry, LogEngine, COMMIT_MARKER, RECORD_HEADER, TAG_REDO};
use crate::pheap::{Pool, RecoveryReport};
use crate::txn::{NestGuard, Transaction, TxMem};

pub struct RedoTxn<'p> {
    pool: &'p Pool,
    log: &'p LogEngine,
    slot: u32,
    base: u64,
    txn_id: u64,
    cursor: u64,
    count: u64,
    chain: crc32fast::Hasher,
    writes: Vec<(u64, Vec<u8>)>,
    logged: u64,
    active: bool,
    alloc_guard: Option<MutexGuard<'p, ()>>,
    _nest: NestGuard,
}

impl<'p> RedoTxn<'p> {
    pub(crate) fn begin(pool: &'p Pool, log: &'p LogEngine, nest: NestGuard) -> Result<Self> {
        let slot = log.acquire_slot()?;
        let base = log.slot_base(slot);
        let txn_id = log.next_txn_id();
        let d = pool.domain();
        let started = d
            .store(base, &txn_id.to_le_bytes())
            .and_then(|_| d.flush(base, 8));
        if let Err(e) = started {
            log.release_slot(slot);
            return Err(e);
        }
        Ok(RedoTxn {
            pool,
            log,
            slot,
            base,
            txn_id,
            cursor: 8,
            count: 0,
            chain: crc32fast::Hasher::new(),
            writes: Vec::new(),
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

    /// Number of records appended so far.
    pub fn record_count(&self) -> u64 {
        self.count
    }

    /// Bytes this transaction has appended to its log, marker included
    /// once committed.
    pub fn bytes_logged(&self) -> u64 {
        self.logged
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

        for (off, data) in &self.writes {
            d.store(*off, data)?;
            d.flush(*off, data.len() as u64)?;
        }
        d.fence()?;
        self.truncate()
    }

    fn truncate(&mut self) -> Result<()> {
        self.active = false;
        let d = self.pool.domain();
        let res = d
            .store(self.base, &0u64.to_le_bytes())
            .and_then(|_| d.flush(self.base, 8))
            .and_then(|_| d.fence());
        self.log.release_slot(self.slot);
        self.alloc_guard = None;
        res
    }

    fn abort_inner(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.writes.clear();
        self.truncate()
    }
}

impl TxMem for RedoTxn<'_> {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.pool.domain().read(offset, buf)?;
        let end = offset + buf.len() as u64;
        for (w_off, data) in &self.writes {
            let w_end = w_off + data.len() as u64;
            let lo = offset.max(*w_off);
            let hi = end.min(w_end);
            if lo < hi {
                buf[(lo - offset) as usize..(hi - offset) as usize]
                    .copy_from_slice(&data[(lo - w_off) as usize..(hi - w_off) as usize]);
            }
        }
        Ok(())
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.pool.check_target(offset, data.len() as u64)?;
        let size = RECORD_HEADER + data.len() as u64;
        if self.cursor + size + COMMIT_MARKER > self.log.slot_size {
            self.abort_inner()?;
            return Err(Error::OutOfLog);
        }
        let (record, crc) = log::encode_record(TAG_REDO, self.txn_id, offset, data);
        let at = self.base + self.cursor;
        let d = self.pool.domain();
        d.store(at, &record)?;
        d.flush(at, size)?;
        self.cursor += size;
        self.count += 1;
        self.chain.update(&crc.to_le_bytes());
        self.writes.push((offset, data.to_vec()));
        self.logged += size;
        self.pool.stats.logged(size);
        Ok(())
    }
}

impl<'p> Transaction<'p> for RedoTxn<'p> {
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

impl Drop for RedoTxn<'_> {
    fn drop(&mut self) {
        if self.active {
            let _ = self.abort_inner();
        }
    }
}

struct SlotScan {
    txn_id: u64,
    records: Vec<log::LogRecord>,
    committed: bool,
}

/// Replay every slot that ends in a valid commit marker, drop the rest,
/// then clear all slots.
pub fn recover(pool: &Pool) -> Result<RecoveryReport> {
    let log = pool.log_engine()?;
    let d = pool.domain();
    let mut report = RecoveryReport::default();
    let mut scans = Vec::new();
    for slot in 0..log.slots {
        let base = log.slot_base(slot);
        let end = base + log.slot_size;
        let txn_id = d.read_u64(base)?;
        if txn_id == 0 {
            continue;
        }
        let mut at = base + 8;
        let mut chain = crc32fast::Hasher::new();
        let mut records = Vec::new();
        let committed = loop {
            let count = records.len() as u64;
            match log::read_entry(d, at, end, TAG_REDO, txn_id, count, chain.clone().finalize())? {
                Entry::Record(r) => {
                    chain.update(&r.crc.to_le_bytes());
                    at += RECORD_HEADER + r.payload.len() as u64;
                    records.push(r);
                }
                Entry::Marker => break true,
                Entry::Invalid => break false,
            }
        };
        scans.push((slot, SlotScan {
            txn_id,
            records,
            committed,
        }));
    }
    scans.sort_by_key(|(_, s)| s.txn_id);

    for (_, scan) in scans.iter().filter(|(_, s)| s.committed) {
        for r in &scan.records {
            d.store(r.target, &r.payload)?;
            d.flush(r.target, r.payload.len() as u64)?;
        }
        report.replayed += 1;
    }
    report.discarded = scans.iter().filter(|(_, s)| !s.committed).count() as u64;
    if report.replayed > 0 {
        d.fence()?;
    }
    if !scans.is_empty() {
        for (slot, _) in &scans {
            let base = log.slot_base(*slot);
            d.store(base, &0u64.to_le_bytes())?;
            d.flush(base, 8)?;
        }
        d.fence()?;
    }
    Ok(report)
}
