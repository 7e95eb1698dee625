//! Per-thread log slots shared by the redo and undo engines.
//!
//! The log region starts with a 64-byte descriptor:
//!
//! ```text
//! 0..4    backend tag
//! 4..8    slot count
//! 8..16   slot size
//! 16..24  snapshot unit (undo)
//! 24..32  transaction id base for the next session
//! ```
//!
//! Slots follow back to back. A slot begins with the id of its active
//! transaction (0 when empty); undo slots add an 8-byte durable record
//! count. Records carry a 16-byte header: target offset with a variant tag
//! in the top byte, payload length, and a crc32 over tag, transaction id,
//! target, length and payload. A commit marker is a 24-byte record with
//! length `0xFFFFFFFF` whose payload is the transaction id; its crc covers
//! the id, the record count and the chained crcs of every record before it.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::persist::PersistDomain;
use crate::pheap::{Backend, PoolOptions, OBJECT_SPACE_START, OFF_ROOT};
use crate::txn::TxMem;

pub const RECORD_HEADER: u64 = 16;
pub const COMMIT_MARKER: u64 = 24;
pub(crate) const COMMIT_LEN: u32 = u32::MAX;
pub(crate) const TAG_REDO: u8 = b'R';
pub(crate) const TAG_UNDO: u8 = b'U';
pub(crate) const TAG_COMMIT: u8 = b'C';
pub(crate) const SLOTS_START: u64 = 64;
const TARGET_MASK: u64 = (1 << 56) - 1;
const SESSION_STRIDE: u64 = 1 << 32;

pub(crate) struct LogEngine {
    #[allow(dead_code)]
    pub backend: Backend,
    pub region: u64,
    pub slots: u32,
    pub slot_size: u64,
    pub snapshot_unit: u64,
    free_slots: Mutex<Vec<u32>>,
    txn_base: u64,
    txn_seq: AtomicU64,
}

impl LogEngine {
    pub(crate) fn format<M: TxMem>(
        w: &mut M,
        opts: &PoolOptions,
        region: u64,
        region_bytes: u64,
    ) -> Result<()> {
        debug_assert!(SLOTS_START + opts.log_slots as u64 * opts.log_slot_size <= region_bytes);
        let mut d = [0u8; 32];
        d[0..4].copy_from_slice(&opts.backend.tag().to_le_bytes());
        d[4..8].copy_from_slice(&opts.log_slots.to_le_bytes());
        d[8..16].copy_from_slice(&opts.log_slot_size.to_le_bytes());
        d[16..24].copy_from_slice(&opts.snapshot_unit.to_le_bytes());
        d[24..32].copy_from_slice(&SESSION_STRIDE.to_le_bytes());
        w.write(region, &d)
    }

    pub(crate) fn load(
        domain: &PersistDomain,
        backend: Backend,
        region: u64,
        region_size: u64,
    ) -> Result<Self> {
        let mut d = [0u8; 32];
        domain.read(region, &mut d)?;
        let tag = u32::from_le_bytes(d[0..4].try_into().unwrap());
        let slots = u32::from_le_bytes(d[4..8].try_into().unwrap());
        let slot_size = u64::from_le_bytes(d[8..16].try_into().unwrap());
        let snapshot_unit = u64::from_le_bytes(d[16..24].try_into().unwrap());
        let txn_base = u64::from_le_bytes(d[24..32].try_into().unwrap());
        if tag != backend.tag() {
            return Err(Error::Corruption("log descriptor backend mismatch".into()));
        }
        let fits = (slots as u64)
            .checked_mul(slot_size)
            .and_then(|b| b.checked_add(SLOTS_START))
            .is_some_and(|b| b <= region_size);
        if slots == 0 || slot_size < 256 || slot_size % 64 != 0 || !fits {
            return Err(Error::Corruption("log descriptor geometry invalid".into()));
        }
        if backend == Backend::Undo && ![64, 256, 4096].contains(&snapshot_unit) {
            return Err(Error::Corruption("undo snapshot unit invalid".into()));
        }
        Ok(LogEngine {
            backend,
            region,
            slots,
            slot_size,
            snapshot_unit,
            free_slots: Mutex::new((0..slots).rev().collect()),
            txn_base,
            txn_seq: AtomicU64::new(0),
        })
    }

    /// Reserve a fresh transaction id range for this session so ids never
    /// repeat across restarts.
    pub(crate) fn start_session(&mut self, domain: &PersistDomain) -> Result<()> {
        let base = domain.read_u64(self.region + 24)?;
        let next = base + SESSION_STRIDE;
        domain.store(self.region + 24, &next.to_le_bytes())?;
        domain.flush(self.region + 24, 8)?;
        domain.fence()?;
        self.txn_base = base;
        self.txn_seq.store(0, Ordering::Relaxed);
        Ok(())
    }

    pub(crate) fn slot_base(&self, slot: u32) -> u64 {
        self.region + SLOTS_START + slot as u64 * self.slot_size
    }

    pub(crate) fn acquire_slot(&self) -> Result<u32> {
        self.free_slots.lock().pop().ok_or(Error::OutOfLog)
    }

    pub(crate) fn release_slot(&self, slot: u32) {
        let mut free = self.free_slots.lock();
        free.push(slot);
        // keep lowest slots at the top of the stack
        free.sort_unstable_by(|a, b| b.cmp(a));
    }

    pub(crate) fn next_txn_id(&self) -> u64 {
        self.txn_base + self.txn_seq.fetch_add(1, Ordering::Relaxed) + 1
    }
}

pub(crate) fn record_crc(tag: u8, txn_id: u64, target: u64, len: u32, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[tag]);
    h.update(&txn_id.to_le_bytes());
    h.update(&target.to_le_bytes());
    h.update(&len.to_le_bytes());
    h.update(payload);
    h.finalize()
}

pub(crate) fn encode_record(tag: u8, txn_id: u64, target: u64, payload: &[u8]) -> (Vec<u8>, u32) {
    let len = payload.len() as u32;
    let crc = record_crc(tag, txn_id, target, len, payload);
    let mut b = Vec::with_capacity(RECORD_HEADER as usize + payload.len());
    b.extend_from_slice(&(((tag as u64) << 56) | target).to_le_bytes());
    b.extend_from_slice(&len.to_le_bytes());
    b.extend_from_slice(&crc.to_le_bytes());
    b.extend_from_slice(payload);
    (b, crc)
}

fn marker_crc(txn_id: u64, count: u64, chain: u32) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[TAG_COMMIT]);
    h.update(&txn_id.to_le_bytes());
    h.update(&count.to_le_bytes());
    h.update(&chain.to_le_bytes());
    h.finalize()
}

pub(crate) fn encode_marker(txn_id: u64, count: u64, chain: u32) -> [u8; 24] {
    let mut b = [0u8; 24];
    b[0..8].copy_from_slice(&(((TAG_COMMIT as u64) << 56) | count).to_le_bytes());
    b[8..12].copy_from_slice(&COMMIT_LEN.to_le_bytes());
    b[12..16].copy_from_slice(&marker_crc(txn_id, count, chain).to_le_bytes());
    b[16..24].copy_from_slice(&txn_id.to_le_bytes());
    b
}

pub(crate) struct LogRecord {
    pub target: u64,
    pub payload: Vec<u8>,
    pub crc: u32,
}

pub(crate) enum Entry {
    Record(LogRecord),
    Marker,
    Invalid,
}

/// Decode the entry at `at` inside a slot ending at `slot_end`.
pub(crate) fn read_entry(
    domain: &PersistDomain,
    at: u64,
    slot_end: u64,
    tag: u8,
    txn_id: u64,
    count: u64,
    chain: u32,
) -> Result<Entry> {
    if at + RECORD_HEADER > slot_end {
        return Ok(Entry::Invalid);
    }
    let mut h = [0u8; 16];
    domain.read(at, &mut h)?;
    let tagged = u64::from_le_bytes(h[0..8].try_into().unwrap());
    let len = u32::from_le_bytes(h[8..12].try_into().unwrap());
    let crc = u32::from_le_bytes(h[12..16].try_into().unwrap());
    let entry_tag = (tagged >> 56) as u8;
    let target = tagged & TARGET_MASK;
    if len == COMMIT_LEN {
        if at + COMMIT_MARKER > slot_end || entry_tag != TAG_COMMIT || target != count {
            return Ok(Entry::Invalid);
        }
        let id = domain.read_u64(at + RECORD_HEADER)?;
        if id == txn_id && crc == marker_crc(txn_id, count, chain) {
            return Ok(Entry::Marker);
        }
        return Ok(Entry::Invalid);
    }
    let end = at + RECORD_HEADER + len as u64;
    if entry_tag != tag || end > slot_end {
        return Ok(Entry::Invalid);
    }
    let mut payload = vec![0u8; len as usize];
    domain.read(at + RECORD_HEADER, &mut payload)?;
    if crc != record_crc(tag, txn_id, target, len, &payload) {
        return Ok(Entry::Invalid);
    }
    let pool_end = domain.size();
    let root_word = target == OFF_ROOT && len == 8;
    if !root_word && (target < OBJECT_SPACE_START || target + len as u64 > pool_end) {
        return Ok(Entry::Invalid);
    }
    Ok(Entry::Record(LogRecord {
        target,
        payload,
        crc,
    }))
}
