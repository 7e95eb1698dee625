//! Named allocations with page-granularity checkpoints.
//!
//! Transactions on this backend write straight into the volatile image and
//! mark the touched pages dirty. Nothing reaches the home locations until
//! [`Pool::checkpoint`] copies every dirty page into a checkpoint epoch in
//! the log region and, once the epoch's marker is durable, flushes the home
//! pages. A crash therefore always recovers to the most recent completed
//! checkpoint.
//!
//! Log region layout:
//!
//! ```text
//! 0..4     kind (3)
//! 8..16    log region bytes
//! 16..24   first live epoch id
//! 24..32   catalog reference
//! 32..36   catalog capacity
//! 64..     epochs
//! ```
//!
//! An epoch is a 16-byte header (`epoch_id u64, page_count u32, crc u32`),
//! `page_count` records of `page u64, data [4096], crc u32`, and a 24-byte
//! marker (`"PMKTEPOC", epoch_id u64, page_count u32, crc u32`) whose crc
//! chains over the header and every record.
//!
//! The catalog is an ordinary allocation: a `u64` high-water count followed
//! by 52-byte entries (`name [32], offset u64, size u64, crc u32`). An
//! all-zero entry is vacant and gets reused.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, MutexGuard, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use crate::persist::PersistDomain;
use crate::pheap::{alloc, PRef, Pool, ReadView, RecoveryReport, PAGE_SIZE};
use crate::txn::{self, NestGuard, Transaction, TxMem};

pub const NAME_MAX: usize = 32;
pub const CATALOG_ENTRY: u64 = 52;
pub const EPOCH_HEADER: u64 = 16;
pub const PAGE_RECORD: u64 = 8 + PAGE_SIZE + 4;
pub const EPOCH_MARKER: u64 = 24;

const KIND_NAMED: u32 = 3;
const EPOCHS_START: u64 = 64;
const EPOCH_MAGIC: [u8; 8] = *b"PMKTEPOC";
const FIRST_EPOCH: u64 = 1;

pub(crate) fn catalog_bytes(capacity: u32) -> u64 {
    8 + capacity as u64 * CATALOG_ENTRY
}

pub(crate) fn format<M: TxMem>(
    w: &mut M,
    region: u64,
    log_bytes: u64,
    catalog: PRef,
    capacity: u32,
) -> Result<()> {
    let mut d = [0u8; 36];
    d[0..4].copy_from_slice(&KIND_NAMED.to_le_bytes());
    d[8..16].copy_from_slice(&log_bytes.to_le_bytes());
    d[16..24].copy_from_slice(&FIRST_EPOCH.to_le_bytes());
    d[24..32].copy_from_slice(&catalog.offset().to_le_bytes());
    d[32..36].copy_from_slice(&capacity.to_le_bytes());
    w.write(region, &d)
}

/// Session-bound reference to a named allocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NvHandle {
    offset: u64,
    size: u64,
    session: u64,
}

impl NvHandle {
    /// Offset of the allocation header.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Size requested when the name was allocated.
    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn pref(&self) -> PRef {
        PRef::new(self.offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct CatalogEntry {
    slot: u32,
    offset: u64,
    size: u64,
}

#[derive(Default)]
struct NameIndex {
    by_name: HashMap<String, CatalogEntry>,
    vacant: BTreeSet<u32>,
    high: u32,
}

struct EpochState {
    base_epoch: u64,
    next_epoch: u64,
    cursor: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub epoch: u64,
    pub pages: u64,
}

pub(crate) struct NamedEngine {
    region: u64,
    log_bytes: u64,
    catalog: PRef,
    capacity: u32,
    dirty: Vec<AtomicU64>,
    quiesce: RwLock<()>,
    index: Mutex<NameIndex>,
    epochs: Mutex<EpochState>,
}

impl NamedEngine {
    pub(crate) fn load(
        domain: &PersistDomain,
        heap: &alloc::Heap,
        region: u64,
        region_size: u64,
    ) -> Result<Self> {
        let mut d = [0u8; 36];
        domain.read(region, &mut d)?;
        let kind = u32::from_le_bytes(d[0..4].try_into().unwrap());
        let log_bytes = u64::from_le_bytes(d[8..16].try_into().unwrap());
        let base_epoch = u64::from_le_bytes(d[16..24].try_into().unwrap());
        let catalog = PRef::new(u64::from_le_bytes(d[24..32].try_into().unwrap()));
        let capacity = u32::from_le_bytes(d[32..36].try_into().unwrap());
        if kind != KIND_NAMED || log_bytes != region_size || base_epoch < FIRST_EPOCH {
            return Err(Error::Corruption("checkpoint log descriptor invalid".into()));
        }
        let cat = alloc::live_header(&ReadView(domain), heap, catalog)?;
        if !cat.is_some_and(|h| h.size >= catalog_bytes(capacity)) {
            return Err(Error::Corruption("catalog block invalid".into()));
        }
        let pages = domain.size() / PAGE_SIZE;
        Ok(NamedEngine {
            region,
            log_bytes,
            catalog,
            capacity,
            dirty: (0..pages.div_ceil(64)).map(|_| AtomicU64::new(0)).collect(),
            quiesce: RwLock::new(()),
            index: Mutex::new(NameIndex::default()),
            epochs: Mutex::new(EpochState {
                base_epoch,
                next_epoch: base_epoch,
                cursor: region + EPOCHS_START,
            }),
        })
    }

    fn mark_dirty(&self, offset: u64, len: u64) {
        if len == 0 {
            return;
        }
        for page in offset / PAGE_SIZE..=(offset + len - 1) / PAGE_SIZE {
            self.dirty[(page / 64) as usize].fetch_or(1 << (page % 64), Ordering::Relaxed);
        }
    }

    fn dirty_pages(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (i, w) in self.dirty.iter().enumerate() {
            let mut bits = w.load(Ordering::Relaxed);
            while bits != 0 {
                let b = bits.trailing_zeros() as u64;
                out.push(i as u64 * 64 + b);
                bits &= bits - 1;
            }
        }
        out
    }

    fn clear_dirty(&self, pages: &[u64]) {
        for &p in pages {
            self.dirty[(p / 64) as usize].fetch_and(!(1 << (p % 64)), Ordering::Relaxed);
        }
    }

    fn entry_addr(&self, slot: u32) -> u64 {
        self.catalog.payload() + 8 + slot as u64 * CATALOG_ENTRY
    }

    pub(crate) fn catalog_ref(&self) -> PRef {
        self.catalog
    }

    fn log_end(&self) -> u64 {
        self.region + self.log_bytes
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > NAME_MAX || name.as_bytes().contains(&0) {
        return Err(Error::Config(format!(
            "name {name:?} must be 1 to {NAME_MAX} bytes without NUL"
        )));
    }
    Ok(())
}

fn entry_crc(name: &[u8; NAME_MAX], offset: u64, size: u64) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(name);
    h.update(&offset.to_le_bytes());
    h.update(&size.to_le_bytes());
    h.finalize()
}

fn encode_entry(name: &str, offset: u64, size: u64) -> [u8; CATALOG_ENTRY as usize] {
    let mut raw = [0u8; NAME_MAX];
    raw[..name.len()].copy_from_slice(name.as_bytes());
    let mut b = [0u8; CATALOG_ENTRY as usize];
    b[..32].copy_from_slice(&raw);
    b[32..40].copy_from_slice(&offset.to_le_bytes());
    b[40..48].copy_from_slice(&size.to_le_bytes());
    b[48..52].copy_from_slice(&entry_crc(&raw, offset, size).to_le_bytes());
    b
}

enum NameOp {
    Added { name: String, slot: u32, from_vacant: bool },
    Removed { name: String, entry: CatalogEntry },
}

pub struct NamedTxn<'p> {
    pool: &'p Pool,
    engine: &'p NamedEngine,
    undo: Vec<(u64, Vec<u8>)>,
    names: Vec<NameOp>,
    active: bool,
    alloc_guard: Option<MutexGuard<'p, ()>>,
    _quiesce: RwLockReadGuard<'p, ()>,
    _nest: NestGuard,
}

impl<'p> NamedTxn<'p> {
    pub(crate) fn begin(pool: &'p Pool, engine: &'p NamedEngine, nest: NestGuard) -> Result<Self> {
        Ok(NamedTxn {
            pool,
            engine,
            undo: Vec::new(),
            names: Vec::new(),
            active: true,
            alloc_guard: None,
            _quiesce: engine.quiesce.read(),
            _nest: nest,
        })
    }

    fn handle(&self, e: &CatalogEntry) -> NvHandle {
        NvHandle {
            offset: e.offset,
            size: e.size,
            session: self.pool.id(),
        }
    }

    /// Allocate `size` bytes and bind them to `name`.
    pub fn nv_alloc(&mut self, name: &str, size: u64) -> Result<NvHandle> {
        if !self.active {
            return Err(Error::TxState);
        }
        check_name(name)?;
        // every catalog change happens under the allocator lock
        self.hold_allocator();
        let (slot, from_vacant, high) = {
            let idx = self.engine.index.lock();
            if idx.by_name.contains_key(name) {
                return Err(Error::NameCollision(name.to_string()));
            }
            match idx.vacant.first() {
                Some(&s) => (s, true, idx.high),
                None if idx.high < self.engine.capacity => (idx.high, false, idx.high),
                None => return Err(Error::Backend("name catalog full".into())),
            }
        };
        let r = self.alloc(size)?;
        self.write(self.engine.entry_addr(slot), &encode_entry(name, r.offset(), size))?;
        if !from_vacant {
            self.write_u64(self.engine.catalog.payload(), high as u64 + 1)?;
        }
        let entry = CatalogEntry {
            slot,
            offset: r.offset(),
            size,
        };
        let mut idx = self.engine.index.lock();
        if from_vacant {
            idx.vacant.remove(&slot);
        } else {
            idx.high += 1;
        }
        idx.by_name.insert(name.to_string(), entry);
        self.names.push(NameOp::Added {
            name: name.to_string(),
            slot,
            from_vacant,
        });
        Ok(self.handle(&entry))
    }

    pub fn nv_free(&mut self, name: &str) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.hold_allocator();
        let entry = self
            .engine
            .index
            .lock()
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(name.to_string()))?;
        self.free(PRef::new(entry.offset))?;
        self.write(self.engine.entry_addr(entry.slot), &[0u8; CATALOG_ENTRY as usize])?;
        let mut idx = self.engine.index.lock();
        idx.by_name.remove(name);
        idx.vacant.insert(entry.slot);
        self.names.push(NameOp::Removed {
            name: name.to_string(),
            entry,
        });
        Ok(())
    }

    /// Resolve `name` inside this transaction.
    pub fn nv_lookup(&self, name: &str) -> Result<NvHandle> {
        let e = self
            .engine
            .index
            .lock()
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(name.to_string()))?;
        self.pool.stats.name_resolutions.fetch_add(1, Ordering::Relaxed);
        Ok(self.handle(&e))
    }

    fn abort_inner(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.active = false;
        let d = self.pool.domain();
        let mut res = Ok(());
        for (off, old) in self.undo.drain(..).rev() {
            if let Err(e) = d.store(off, &old) {
                res = Err(e);
            }
        }
        let mut idx = self.engine.index.lock();
        for op in self.names.drain(..).rev() {
            match op {
                NameOp::Added {
                    name,
                    slot,
                    from_vacant,
                } => {
                    idx.by_name.remove(&name);
                    if from_vacant {
                        idx.vacant.insert(slot);
                    } else {
                        idx.high -= 1;
                    }
                }
                NameOp::Removed { name, entry } => {
                    idx.vacant.remove(&entry.slot);
                    idx.by_name.insert(name, entry);
                }
            }
        }
        drop(idx);
        self.alloc_guard = None;
        res
    }
}

impl TxMem for NamedTxn<'_> {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.pool.domain().read(offset, buf)
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.pool.check_target(offset, data.len() as u64)?;
        let d = self.pool.domain();
        let mut old = vec![0u8; data.len()];
        d.read(offset, &mut old)?;
        d.store(offset, data)?;
        self.engine.mark_dirty(offset, data.len() as u64);
        self.undo.push((offset, old));
        Ok(())
    }
}

impl<'p> Transaction<'p> for NamedTxn<'p> {
    fn pool(&self) -> &'p Pool {
        self.pool
    }

    fn hold_allocator(&mut self) {
        if self.alloc_guard.is_none() {
            self.alloc_guard = Some(self.pool.alloc_lock());
        }
    }

    /// Commits become durable at the next checkpoint.
    fn commit(mut self) -> Result<()> {
        if !self.active {
            return Err(Error::TxState);
        }
        self.active = false;
        self.undo.clear();
        self.names.clear();
        self.alloc_guard = None;
        self.pool.stats.commits.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    fn abort(mut self) -> Result<()> {
        self.abort_inner()
    }
}

impl Drop for NamedTxn<'_> {
    fn drop(&mut self) {
        if self.active {
            let _ = self.abort_inner();
        }
    }
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

fn epoch_header_crc(epoch: u64, pages: u32) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&epoch.to_le_bytes());
    h.update(&pages.to_le_bytes());
    h.finalize()
}

fn page_crc(epoch: u64, page: u64, data: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&epoch.to_le_bytes());
    h.update(&page.to_le_bytes());
    h.update(data);
    h.finalize()
}

fn marker_crc(epoch: u64, pages: u32, chain: u32) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&EPOCH_MAGIC);
    h.update(&epoch.to_le_bytes());
    h.update(&pages.to_le_bytes());
    h.update(&chain.to_le_bytes());
    h.finalize()
}

fn epoch_len(pages: u64) -> u64 {
    EPOCH_HEADER + pages * PAGE_RECORD + EPOCH_MARKER
}

impl Pool {
    /// Make every committed change durable. Waits for in-flight transactions
    /// to finish and blocks new ones until the checkpoint is done.
    pub fn checkpoint(&self) -> Result<CheckpointInfo> {
        let n = self.named_engine()?;
        if txn::in_transaction(self.id()) {
            return Err(Error::TxState);
        }
        let _quiet = n.quiesce.write();
        let mut ep = n.epochs.lock();
        let pages = n.dirty_pages();
        if pages.is_empty() {
            return Ok(CheckpointInfo {
                epoch: ep.next_epoch.saturating_sub(1),
                pages: 0,
            });
        }
        let d = self.domain();
        let start = n.region + EPOCHS_START;
        let need = epoch_len(pages.len() as u64);
        if ep.cursor + need > n.log_end() {
            if ep.base_epoch != ep.next_epoch {
                ep.base_epoch = ep.next_epoch;
                d.store(n.region + 16, &ep.base_epoch.to_le_bytes())?;
                d.flush(n.region + 16, 8)?;
                d.fence()?;
            }
            ep.cursor = start;
            if start + need > n.log_end() {
                return Err(Error::CheckpointFailed(format!(
                    "{} dirty pages need {need} bytes, log holds {}",
                    pages.len(),
                    n.log_end() - start
                )));
            }
        }
        let epoch = ep.next_epoch;
        let count = pages.len() as u32;
        let mut at = ep.cursor;
        let mut chain = crc32fast::Hasher::new();
        let mut hdr = [0u8; EPOCH_HEADER as usize];
        let hcrc = epoch_header_crc(epoch, count);
        hdr[0..8].copy_from_slice(&epoch.to_le_bytes());
        hdr[8..12].copy_from_slice(&count.to_le_bytes());
        hdr[12..16].copy_from_slice(&hcrc.to_le_bytes());
        chain.update(&hcrc.to_le_bytes());
        d.store(at, &hdr)?;
        d.flush(at, EPOCH_HEADER)?;
        at += EPOCH_HEADER;
        let mut rec = vec![0u8; PAGE_RECORD as usize];
        for &p in &pages {
            rec[0..8].copy_from_slice(&p.to_le_bytes());
            d.read(p * PAGE_SIZE, &mut rec[8..8 + PAGE_SIZE as usize])?;
            let crc = page_crc(epoch, p, &rec[8..8 + PAGE_SIZE as usize]);
            rec[8 + PAGE_SIZE as usize..].copy_from_slice(&crc.to_le_bytes());
            chain.update(&crc.to_le_bytes());
            d.store(at, &rec)?;
            d.flush(at, PAGE_RECORD)?;
            at += PAGE_RECORD;
        }
        d.fence()?;
        let mut marker = [0u8; EPOCH_MARKER as usize];
        marker[0..8].copy_from_slice(&EPOCH_MAGIC);
        marker[8..16].copy_from_slice(&epoch.to_le_bytes());
        marker[16..20].copy_from_slice(&count.to_le_bytes());
        marker[20..24].copy_from_slice(&marker_crc(epoch, count, chain.finalize()).to_le_bytes());
        d.store(at, &marker)?;
        d.flush(at, EPOCH_MARKER)?;
        d.fence()?;
        self.stats.last_ack_event.store(d.events(), Ordering::Release);
        self.stats.logged(pages.len() as u64 * PAGE_SIZE);

        for &p in &pages {
            d.flush(p * PAGE_SIZE, PAGE_SIZE)?;
        }
        d.fence()?;
        n.clear_dirty(&pages);
        ep.next_epoch += 1;
        ep.cursor = at + EPOCH_MARKER;
        Ok(CheckpointInfo {
            epoch,
            pages: pages.len() as u64,
        })
    }

    /// Number of pages modified since the last checkpoint.
    pub fn dirty_page_count(&self) -> Result<u64> {
        Ok(self.named_engine()?.dirty_pages().len() as u64)
    }

    /// Resolve `name` to a handle valid for this session.
    pub fn nv_recover(&self, name: &str) -> Result<NvHandle> {
        let n = self.named_engine()?;
        let e = n
            .index
            .lock()
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(name.to_string()))?;
        self.stats.name_resolutions.fetch_add(1, Ordering::Relaxed);
        Ok(NvHandle {
            offset: e.offset,
            size: e.size,
            session: self.id(),
        })
    }

    /// Catalog lookup that does not count as a name resolution.
    pub(crate) fn nv_lookup_quiet(&self, name: &str) -> Result<Option<PRef>> {
        let n = self.named_engine()?;
        Ok(n.index.lock().by_name.get(name).map(|e| PRef::new(e.offset)))
    }

    /// Reference behind `h`, provided `h` was issued by this session.
    pub fn nv_ref(&self, h: &NvHandle) -> Result<PRef> {
        if h.session != self.id() {
            return Err(Error::StaleHandle);
        }
        Ok(h.pref())
    }

    /// Allocate a named block in a transaction of its own.
    pub fn nv_alloc(&self, name: &str, size: u64) -> Result<NvHandle> {
        let n = self.named_engine()?;
        let nest = NestGuard::enter(self.id())?;
        let mut t = NamedTxn::begin(self, n, nest)?;
        let h = t.nv_alloc(name, size)?;
        t.commit()?;
        Ok(h)
    }

    pub fn nv_free(&self, name: &str) -> Result<()> {
        let n = self.named_engine()?;
        let nest = NestGuard::enter(self.id())?;
        let mut t = NamedTxn::begin(self, n, nest)?;
        t.nv_free(name)?;
        t.commit()
    }

    /// Every name in the catalog, sorted.
    pub fn nv_names(&self) -> Result<Vec<String>> {
        let n = self.named_engine()?;
        let mut names: Vec<String> = n.index.lock().by_name.keys().cloned().collect();
        names.sort();
        Ok(names)
    }
}

struct Epoch {
    pages: Vec<(u64, Vec<u8>)>,
    end: u64,
}

/// Decode the epoch at `at`. `Ok(None)` means the epoch is missing or was
/// torn before its marker became durable.
fn read_epoch(d: &PersistDomain, at: u64, log_end: u64, epoch: u64) -> Result<Option<Epoch>> {
    if at + EPOCH_HEADER + EPOCH_MARKER > log_end {
        return Ok(None);
    }
    let mut hdr = [0u8; EPOCH_HEADER as usize];
    d.read(at, &mut hdr)?;
    let count = u32_at(&hdr, 8);
    let hcrc = u32_at(&hdr, 12);
    if u64_at(&hdr, 0) != epoch || hcrc != epoch_header_crc(epoch, count) {
        return Ok(None);
    }
    let end = at + epoch_len(count as u64);
    if end > log_end {
        return Ok(None);
    }
    let mut marker = [0u8; EPOCH_MARKER as usize];
    d.read(end - EPOCH_MARKER, &mut marker)?;
    let mut rec = vec![0u8; PAGE_RECORD as usize];
    let mut crcs = Vec::with_capacity(count as usize);
    let mut chain = crc32fast::Hasher::new();
    chain.update(&hcrc.to_le_bytes());
    for i in 0..count as u64 {
        d.read(at + EPOCH_HEADER + i * PAGE_RECORD, &mut rec)?;
        let stored = u32_at(&rec, 8 + PAGE_SIZE as usize);
        chain.update(&stored.to_le_bytes());
        crcs.push(stored);
    }
    let marker_ok = marker[0..8] == EPOCH_MAGIC
        && u64_at(&marker, 8) == epoch
        && u32_at(&marker, 16) == count
        && u32_at(&marker, 20) == marker_crc(epoch, count, chain.finalize());
    if !marker_ok {
        return Ok(None);
    }
    let pages_total = d.size() / PAGE_SIZE;
    let mut pages = Vec::with_capacity(count as usize);
    for (i, stored) in crcs.into_iter().enumerate() {
        d.read(at + EPOCH_HEADER + i as u64 * PAGE_RECORD, &mut rec)?;
        let page = u64_at(&rec, 0);
        let data = &rec[8..8 + PAGE_SIZE as usize];
        if stored != page_crc(epoch, page, data) || page == 0 || page >= pages_total {
            return Err(Error::Corruption(format!(
                "epoch {epoch}: page record {i} damaged under a valid marker"
            )));
        }
        pages.push((page, data.to_vec()));
    }
    Ok(Some(Epoch { pages, end }))
}

/// Replay committed epochs and rebuild the name index. With `clean` set the
/// home pages are already current, so only the scan runs.
pub fn recover(pool: &Pool, clean: bool) -> Result<RecoveryReport> {
    let n = pool.named_engine()?;
    let d = pool.domain();
    let _quiet = n.quiesce.write();
    let mut report = RecoveryReport::default();
    let mut ep = n.epochs.lock();
    ep.base_epoch = d.read_u64(n.region + 16)?;
    let mut at = n.region + EPOCHS_START;
    let mut epoch = ep.base_epoch;
    let mut found = Vec::new();
    while let Some(e) = read_epoch(d, at, n.log_end(), epoch)? {
        at = e.end;
        epoch += 1;
        found.push(e);
    }
    // a header for the next epoch without a durable marker is a torn tail
    if at + EPOCH_HEADER <= n.log_end() && d.read_u64(at)? == epoch {
        report.epochs_discarded = 1;
    }
    ep.next_epoch = epoch;
    ep.cursor = at;
    drop(ep);
    if !clean {
        for e in &found {
            for (page, data) in &e.pages {
                d.store(page * PAGE_SIZE, data)?;
                d.flush(page * PAGE_SIZE, PAGE_SIZE)?;
            }
        }
        if !found.is_empty() {
            d.fence()?;
        }
        report.epochs_replayed = found.len() as u64;
    }
    n.clear_dirty(&n.dirty_pages());

    let mut idx = NameIndex::default();
    let view = ReadView(d);
    let heap = pool.heap();
    let high = d.read_u64(n.catalog.payload())?;
    if high > n.capacity as u64 {
        return Err(Error::Corruption(format!(
            "catalog count {high} exceeds capacity {}",
            n.capacity
        )));
    }
    idx.high = high as u32;
    let mut b = [0u8; CATALOG_ENTRY as usize];
    for slot in 0..idx.high {
        d.read(n.entry_addr(slot), &mut b)?;
        if b.iter().all(|&x| x == 0) {
            idx.vacant.insert(slot);
            continue;
        }
        let raw: [u8; NAME_MAX] = b[..32].try_into().unwrap();
        let offset = u64_at(&b, 32);
        let size = u64_at(&b, 40);
        if u32_at(&b, 48) != entry_crc(&raw, offset, size) {
            return Err(Error::Corruption(format!("catalog entry {slot} checksum")));
        }
        let len = raw.iter().position(|&c| c == 0).unwrap_or(NAME_MAX);
        let name = std::str::from_utf8(&raw[..len])
            .map_err(|_| Error::Corruption(format!("catalog entry {slot} name")))?
            .to_string();
        let live = alloc::live_header(&view, &heap, PRef::new(offset))?;
        if !live.is_some_and(|h| h.size >= size) {
            return Err(Error::Corruption(format!(
                "catalog entry {name:?} points at no live allocation"
            )));
        }
        let entry = CatalogEntry { slot, offset, size };
        if idx.by_name.insert(name.clone(), entry).is_some() {
            return Err(Error::Corruption(format!("catalog name {name:?} repeated")));
        }
    }
    report.catalog_entries = idx.by_name.len() as u64;
    *n.index.lock() = idx;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::CrashPlan;
    use crate::pheap::{Backend, PoolOptions};
    use crate::txn::Tx;

    fn pool() -> Pool {
        let opts = PoolOptions::compact(Backend::Named, 1 << 20);
        Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap()
    }

    fn named(pool: &Pool) -> NamedTxn<'_> {
        match pool.begin().unwrap() {
            Tx::Named(t) => t,
            _ => unreachable!(),
        }
    }

    #[test]
    fn names_collide_and_resolve() {
        let pool = pool();
        let h = pool.nv_alloc("alpha", 40).unwrap();
        assert!(matches!(pool.nv_alloc("alpha", 8), Err(Error::NameCollision(_))));
        assert!(matches!(pool.nv_alloc("", 8), Err(Error::Config(_))));
        assert!(matches!(pool.nv_alloc(&"x".repeat(33), 8), Err(Error::Config(_))));
        assert_eq!(pool.nv_recover("alpha").unwrap(), h);
        assert_eq!(pool.stats().name_resolutions, 1);
        assert!(matches!(pool.nv_recover("beta"), Err(Error::NotFound(_))));
        pool.nv_free("alpha").unwrap();
        assert!(matches!(pool.nv_free("alpha"), Err(Error::NotFound(_))));
        // vacant entry is reused
        pool.nv_alloc("gamma", 8).unwrap();
        assert_eq!(n_high(&pool), 1);
    }

    fn n_high(pool: &Pool) -> u32 {
        pool.named_engine().unwrap().index.lock().high
    }

    #[test]
    fn stale_handle_after_reopen() {
        let pool = pool();
        let h = pool.nv_alloc("root", 16).unwrap();
        assert_eq!(pool.nv_ref(&h).unwrap(), h.pref());
        let img = pool.close().unwrap().unwrap();
        let pool = Pool::open_image(img).unwrap();
        assert!(matches!(pool.nv_ref(&h), Err(Error::StaleHandle)));
        let h2 = pool.nv_recover("root").unwrap();
        assert_eq!(h2.offset(), h.offset());
        assert_eq!(pool.recovery_report().catalog_entries, 1);
    }

    #[test]
    fn abort_reverts_bytes_and_names() {
        let pool = pool();
        let keep = pool.nv_alloc("keep", 16).unwrap();
        let mut t = named(&pool);
        t.write_field(keep.pref(), 0, &5u64.to_le_bytes()).unwrap();
        t.nv_alloc("temp", 16).unwrap();
        t.nv_free("keep").unwrap();
        t.abort().unwrap();
        assert_eq!(pool.nv_names().unwrap(), vec!["keep".to_string()]);
        let mut b = [0u8; 8];
        pool.read_field(keep.pref(), 0, &mut b).unwrap();
        assert_eq!(b, [0; 8]);
        assert!(pool.audit_heap().unwrap().is_clean());
    }

    #[test]
    fn uncheckpointed_work_is_lost() {
        let pool = pool();
        let h = pool.nv_alloc("a", 16).unwrap();
        pool.checkpoint().unwrap();
        let mut t = named(&pool);
        t.write_field(h.pref(), 0, &9u64.to_le_bytes()).unwrap();
        t.commit().unwrap();
        pool.nv_alloc("b", 16).unwrap();
        assert!(pool.dirty_page_count().unwrap() > 0);
        let img = pool.domain().durable_image().unwrap();
        let rec = Pool::open_image(img).unwrap();
        assert_eq!(rec.nv_names().unwrap(), vec!["a".to_string()]);
        let mut b = [0u8; 8];
        rec.read_field(h.pref(), 0, &mut b).unwrap();
        assert_eq!(b, [0; 8]);
    }

    #[test]
    fn checkpoint_inside_transaction_refused() {
        let pool = pool();
        let t = named(&pool);
        assert!(matches!(pool.checkpoint(), Err(Error::TxState)));
        drop(t);
        assert_eq!(pool.checkpoint().unwrap().pages, 0);
    }

    #[test]
    fn log_wraps_by_truncation() {
        let opts = PoolOptions::compact(Backend::Named, 1 << 20).checkpoint_log(8 * PAGE_SIZE);
        let pool = Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap();
        let h = pool.nv_alloc("v", 8).unwrap();
        for i in 1..20u64 {
            let mut t = named(&pool);
            t.write_field(h.pref(), 0, &i.to_le_bytes()).unwrap();
            t.commit().unwrap();
            pool.checkpoint().unwrap();
        }
        let rec = Pool::open_image(pool.domain().durable_image().unwrap()).unwrap();
        let mut b = [0u8; 8];
        rec.read_field(h.pref(), 0, &mut b).unwrap();
        assert_eq!(u64::from_le_bytes(b), 19);
    }

    #[test]
    fn too_many_dirty_pages_fails_checkpoint() {
        let opts = PoolOptions::compact(Backend::Named, 1 << 20).checkpoint_log(2 * PAGE_SIZE);
        let pool = Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap();
        let h = pool.nv_alloc("big", 3 * PAGE_SIZE).unwrap();
        let mut t = named(&pool);
        t.write_field(h.pref(), 0, &vec![1u8; 3 * PAGE_SIZE as usize]).unwrap();
        t.commit().unwrap();
        assert!(matches!(pool.checkpoint(), Err(Error::CheckpointFailed(_))));
    }

    fn scenario(d: PersistDomain) -> (Pool, u64) {
        let opts = PoolOptions::compact(Backend::Named, 1 << 20);
        let pool = Pool::create_in(d, &opts).unwrap();
        let ready = pool.domain().events();
        let h = pool.nv_alloc("v", 16).unwrap();
        let mut t = named(&pool);
        t.write_field(h.pref(), 0, &7u64.to_le_bytes()).unwrap();
        t.commit().unwrap();
        pool.checkpoint().unwrap();
        (pool, ready)
    }

    #[test]
    fn crash_during_checkpoint() {
        let (pool, ready) = scenario(PersistDomain::new(1 << 20));
        let ack = pool.stats().last_ack_event;
        let end = pool.domain().events();
        for k in 0..=end {
            for adv in [None, Some(3), Some(4)] {
                let d = PersistDomain::new(1 << 20);
                d.arm(k).unwrap();
                let (p, _) = scenario(d);
                let mut plan = CrashPlan::at(k);
                if let Some(s) = adv {
                    plan = plan.with_adversary(s);
                }
                let rec = match Pool::open_image(p.domain().materialize_crash(&plan).unwrap()) {
                    Ok(rec) => rec,
                    Err(Error::Corruption(_)) if k < ready => continue,
                    Err(e) => panic!("k={k}: {e}"),
                };
                if k >= ack {
                    let hv = rec.nv_recover("v").unwrap();
                    let mut b = [0u8; 8];
                    rec.read_field(hv.pref(), 0, &mut b).unwrap();
                    assert_eq!(u64::from_le_bytes(b), 7);
                } else if adv.is_none() || k + 1 < ack {
                    assert!(rec.nv_names().unwrap().is_empty(), "k={k}");
                }
                let once = rec.domain().durable_image().unwrap();
                rec.recover().unwrap();
                assert_eq!(rec.domain().durable_image().unwrap(), once);
                assert!(rec.audit_heap().unwrap().is_clean());
            }
        }
    }

    #[test]
    fn damaged_record_under_valid_marker() {
        let (pool, _) = scenario(PersistDomain::new(1 << 20));
        let mut img = pool.domain().durable_image().unwrap();
        let region = pool.log_region().payload();
        let at = (region + EPOCHS_START + EPOCH_HEADER + 100) as usize;
        img.as_mut_slice()[at] ^= 1;
        assert!(matches!(Pool::open_image(img), Err(Error::Corruption(_))));
    }
}
